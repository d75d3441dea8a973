use std::collections::BTreeMap;

use super::params::{GradientMap, ParameterSet};
use super::tensor::{strides, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        stride: usize,
        padding: usize,
    },
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sum { x: Var, axes: Option<Vec<usize>> },
    Mean { x: Var, axes: Option<Vec<usize>> },
    Softmax(Var),
    Dot(Var, Var),
    Norm(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::Dot(a, b) => vec![*a, *b],
            Op::Conv2d { input, weight, .. } => vec![*input, *weight],
            Op::Relu(x) | Op::Exp(x) | Op::Log(x) | Op::Softmax(x) | Op::Norm(x) => vec![*x],
            Op::Sum { x, .. } | Op::Mean { x, .. } => vec![*x],
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    op: Op,
    value: Tensor<T>,
    /// Whether a parameter leaf lies upstream; other nodes get no gradient.
    tracked: bool,
}

/// Eagerly evaluated computation graph with reverse-mode gradients.
///
/// Nodes are appended in evaluation order, so the node list is a
/// topological order and the graph is acyclic by construction. Input
/// shapes are validated when a node is added.
#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, Var)>,
}

/// Result of [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(String, Var)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to `v`; zero when `v` does not reach the root.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::from_parts_unchecked(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }

    /// Gradients for every named parameter leaf of the graph.
    pub fn by_name(&self) -> GradientMap<T> {
        self.params
            .iter()
            .map(|(name, v)| (name.clone(), self.wrt(*v)))
            .collect()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> Result<T> {
        self.value(v).item()
    }

    fn push(&mut self, op: Op, value: Tensor<T>) -> Var {
        let tracked = op.inputs().iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node { op, value, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Adds a named leaf whose gradient is reported by [`Gradients::by_name`].
    pub fn param(&mut self, name: &str, value: Tensor<T>) -> Result<Var> {
        if self.params.iter().any(|(n, _)| n == name) {
            return Err(Error::contract(format!("duplicate parameter {name}")));
        }
        let v = self.push(Op::Leaf, value);
        self.nodes[v.0].tracked = true;
        self.params.push((name.to_string(), v));
        Ok(v)
    }

    /// Registers every entry of `set` as a parameter leaf.
    pub fn params_from(&mut self, set: &ParameterSet<T>) -> Result<BTreeMap<String, Var>> {
        set.iter()
            .map(|(name, t)| Ok((name.to_string(), self.param(name, t.clone())?)))
            .collect()
    }

    /// Unnamed leaf. Constants receive no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn scalar(&mut self, v: T) -> Result<Var> {
        Ok(self.constant(Tensor::scalar(v)?))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip(a, b, |x, y| x + y, "add")?;
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip(a, b, |x, y| x * y, "mul")?;
        Ok(self.push(Op::Mul(a, b), value))
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T, what: &'static str) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| {
            Error::shape(format!("{what}: {:?} vs {:?}", ta.shape(), tb.shape()))
        })?;
        let ia = index_map(&shape, ta.shape());
        let ib = index_map(&shape, tb.shape());
        let (da, db) = (ta.data(), tb.data());
        let data = ia.iter().zip(&ib).map(|(&i, &j)| f(da[i], db[j])).collect();
        Tensor::from_computed(shape, data, what)
    }

    /// `[m,k] x [k,n] -> [m,n]` or `[m,k] x [k] -> [m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || !(sb.len() == 1 || sb.len() == 2) || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul: {sa:?} x {sb:?}")));
        }
        let (m, k) = (sa[0], sa[1]);
        let n = if sb.len() == 2 { sb[1] } else { 1 };
        let (da, db) = (ta.data(), tb.data());
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &da[i * k..(i + 1) * k];
            let o = &mut out[i * n..(i + 1) * n];
            for (p, &aip) in row.iter().enumerate() {
                let brow = &db[p * n..(p + 1) * n];
                for (oj, &bpj) in o.iter_mut().zip(brow) {
                    *oj += aip * bpj;
                }
            }
        }
        let shape = if sb.len() == 2 { vec![m, n] } else { vec![m] };
        let value = Tensor::from_computed(shape, out, "matmul")?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    /// Cross-correlation of a `[C,H,W]` input with `[O,C,kh,kw]` weights,
    /// zero padding on every side.
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        let (ti, tw) = (self.value(input), self.value(weight));
        let geo = ConvGeometry::new(ti.shape(), tw.shape(), stride, padding)?;
        let out = geo.forward(ti.data(), tw.data());
        let value = Tensor::from_computed(vec![geo.o, geo.oh, geo.ow], out, "conv2d")?;
        Ok(self.push(
            Op::Conv2d {
                input,
                weight,
                stride,
                padding,
            },
            value,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v.max(T::zero())).collect();
        let value = Tensor::from_computed(t.shape().to_vec(), data, "relu")?;
        Ok(self.push(Op::Relu(x), value))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v.exp()).collect();
        let value = Tensor::from_computed(t.shape().to_vec(), data, "exp")?;
        Ok(self.push(Op::Exp(x), value))
    }

    /// Natural log; non-positive inputs fail with a non-finite error.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v.ln()).collect();
        let value = Tensor::from_computed(t.shape().to_vec(), data, "log")?;
        Ok(self.push(Op::Log(x), value))
    }

    /// Sum of every element, giving a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.reduce(x, None, false)
    }

    /// Sum over `axes`; reduced axes are dropped from the shape.
    pub fn sum_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(x, Some(axes.to_vec()), false)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.reduce(x, None, true)
    }

    pub fn mean_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(x, Some(axes.to_vec()), true)
    }

    fn reduce(&mut self, x: Var, axes: Option<Vec<usize>>, mean: bool) -> Result<Var> {
        let t = self.value(x);
        let plan = ReducePlan::new(t.shape(), axes.as_deref())?;
        let mut out = vec![T::zero(); plan.out_len()];
        for (i, &o) in plan.map.iter().enumerate() {
            out[o] += t.data()[i];
        }
        if mean {
            let c = T::lit(plan.count as f64);
            out.iter_mut().for_each(|v| *v = *v / c);
        }
        let value = Tensor::from_computed(plan.out_shape.clone(), out, "reduce")?;
        let op = if mean {
            Op::Mean { x, axes }
        } else {
            Op::Sum { x, axes }
        };
        Ok(self.push(op, value))
    }

    /// Softmax over the last axis, max-shifted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let width = *t.shape().last().unwrap_or(&1);
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(width) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v = *v / s);
        }
        let value = Tensor::from_computed(t.shape().to_vec(), data, "softmax")?;
        Ok(self.push(Op::Softmax(x), value))
    }

    /// Inner product of two equal-length tensors, giving a scalar.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.len() != tb.len() {
            return Err(Error::shape(format!(
                "dot: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let s = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).sum();
        let value = Tensor::from_computed(Vec::new(), vec![s], "dot")?;
        Ok(self.push(Op::Dot(a, b), value))
    }

    /// Euclidean norm of all elements.
    pub fn norm(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s: T = t.data().iter().map(|&v| v * v).sum();
        let value = Tensor::from_computed(Vec::new(), vec![s.sqrt()], "norm")?;
        Ok(self.push(Op::Norm(x), value))
    }

    // Composites built only from the primitives above.

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let k = self.scalar(c)?;
        self.mul(x, k)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -T::one())
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.neg(b)?;
        self.add(a, nb)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let k = self.scalar(c)?;
        self.add(x, k)
    }

    /// `1/x` for positive `x`, as `exp(-log x)`.
    pub fn reciprocal(&mut self, x: Var) -> Result<Var> {
        let l = self.log(x)?;
        let nl = self.neg(l)?;
        self.exp(nl)
    }

    /// `x / ‖x‖`.
    pub fn normalize(&mut self, x: Var) -> Result<Var> {
        let n = self.norm(x)?;
        if self.scalar_value(n)? <= T::zero() {
            return Err(Error::DegenerateEmbedding);
        }
        let r = self.reciprocal(n)?;
        self.mul(x, r)
    }

    /// `a·b / (‖a‖‖b‖)`.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).len() != self.value(b).len() || self.value(a).is_empty() {
            return Err(Error::shape("cosine_similarity: length mismatch"));
        }
        let na = self.norm(a)?;
        let nb = self.norm(b)?;
        if self.scalar_value(na)? <= T::zero() || self.scalar_value(nb)? <= T::zero() {
            return Err(Error::DegenerateEmbedding);
        }
        let d = self.dot(a, b)?;
        let nn = self.mul(na, nb)?;
        let r = self.reciprocal(nn)?;
        self.mul(d, r)
    }

    /// Stabilized `log Σ exp(x_k)` over scalar nodes.
    pub fn log_sum_exp(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::contract("log_sum_exp of empty set"));
        }
        let mut m = T::neg_infinity();
        for &x in xs {
            m = m.max(self.scalar_value(x)?);
        }
        let mut acc: Option<Var> = None;
        for &x in xs {
            let shifted = self.add_scalar(x, -m)?;
            let e = self.exp(shifted)?;
            acc = Some(match acc {
                Some(a) => self.add(a, e)?,
                None => e,
            });
        }
        let l = self.log(acc.expect("nonempty"))?;
        self.add_scalar(l, m)
    }

    /// Sum of scalar nodes in the given order.
    pub fn add_all(&mut self, xs: &[Var]) -> Result<Var> {
        let (&first, rest) = xs
            .split_first()
            .ok_or_else(|| Error::contract("add_all of empty set"))?;
        rest.iter().try_fold(first, |acc, &x| self.add(acc, x))
    }

    /// Reverse pass from a single-element root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            if !self.nodes[i].tracked {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            params: self.params.clone(),
        })
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if !self.tracked(v) {
                        continue;
                    }
                    if self.value(v).shape() == out_shape {
                        for (o, &gi) in slot(grads, v, g.len()).iter_mut().zip(g) {
                            *o += gi;
                        }
                        continue;
                    }
                    let map = index_map(out_shape, self.value(v).shape());
                    let acc = slot(grads, v, self.value(v).len());
                    for (&j, &gi) in map.iter().zip(g) {
                        acc[j] += gi;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ma = index_map(out_shape, ta.shape());
                let mb = index_map(out_shape, tb.shape());
                if self.tracked(*a) {
                    let acc = slot(grads, *a, ta.len());
                    for k in 0..g.len() {
                        acc[ma[k]] += g[k] * tb.data()[mb[k]];
                    }
                }
                if self.tracked(*b) {
                    let acc = slot(grads, *b, tb.len());
                    for k in 0..g.len() {
                        acc[mb[k]] += g[k] * ta.data()[ma[k]];
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = if tb.shape().len() == 2 { tb.shape()[1] } else { 1 };
                let (da, db) = (ta.data(), tb.data());
                {
                    let acc = slot(grads, *a, ta.len());
                    for r in 0..m {
                        let gr = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &db[p * n..(p + 1) * n];
                            let s: T = gr.iter().zip(brow).map(|(&x, &y)| x * y).sum();
                            acc[r * k + p] += s;
                        }
                    }
                }
                let acc = slot(grads, *b, tb.len());
                for r in 0..m {
                    let gr = &g[r * n..(r + 1) * n];
                    for p in 0..k {
                        let arp = da[r * k + p];
                        for (o, &gv) in acc[p * n..(p + 1) * n].iter_mut().zip(gr) {
                            *o += arp * gv;
                        }
                    }
                }
            }
            Op::Conv2d {
                input,
                weight,
                stride,
                padding,
            } => {
                let (ti, tw) = (self.value(*input), self.value(*weight));
                let geo = ConvGeometry::new(ti.shape(), tw.shape(), *stride, *padding)
                    .expect("validated at construction");
                if self.tracked(*input) {
                    let acc = slot(grads, *input, ti.len());
                    geo.backward_input(g, tw.data(), acc);
                }
                if self.tracked(*weight) {
                    let acc = slot(grads, *weight, tw.len());
                    geo.backward_weight(g, ti.data(), acc);
                }
            }
            Op::Relu(x) => {
                let tx = self.value(*x);
                let acc = slot(grads, *x, tx.len());
                for ((o, &xv), &gv) in acc.iter_mut().zip(tx.data()).zip(g) {
                    if xv > T::zero() {
                        *o += gv;
                    }
                }
            }
            Op::Exp(x) => {
                let y = node.value.data();
                let acc = slot(grads, *x, y.len());
                for ((o, &yv), &gv) in acc.iter_mut().zip(y).zip(g) {
                    *o += gv * yv;
                }
            }
            Op::Log(x) => {
                let tx = self.value(*x);
                let acc = slot(grads, *x, tx.len());
                for ((o, &xv), &gv) in acc.iter_mut().zip(tx.data()).zip(g) {
                    *o += gv / xv;
                }
            }
            Op::Sum { x, axes } | Op::Mean { x, axes } => {
                let tx = self.value(*x);
                let plan = ReducePlan::new(tx.shape(), axes.as_deref()).expect("validated");
                let scale = if matches!(node.op, Op::Mean { .. }) {
                    T::one() / T::lit(plan.count as f64)
                } else {
                    T::one()
                };
                let acc = slot(grads, *x, tx.len());
                for (o, &j) in acc.iter_mut().zip(&plan.map) {
                    *o += g[j] * scale;
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let width = *out_shape.last().unwrap_or(&1);
                let acc = slot(grads, *x, y.len());
                for ((yr, gr), ar) in y
                    .chunks(width)
                    .zip(g.chunks(width))
                    .zip(acc.chunks_mut(width))
                {
                    let s: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((o, &yv), &gv) in ar.iter_mut().zip(yr).zip(gr) {
                        *o += yv * (gv - s);
                    }
                }
            }
            Op::Dot(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let g0 = g[0];
                {
                    let acc = slot(grads, *a, ta.len());
                    for (o, &bv) in acc.iter_mut().zip(tb.data()) {
                        *o += g0 * bv;
                    }
                }
                let acc = slot(grads, *b, tb.len());
                for (o, &av) in acc.iter_mut().zip(ta.data()) {
                    *o += g0 * av;
                }
            }
            Op::Norm(x) => {
                let tx = self.value(*x);
                let n = node.value.data()[0];
                if n > T::zero() {
                    let k = g[0] / n;
                    let acc = slot(grads, *x, tx.len());
                    for (o, &xv) in acc.iter_mut().zip(tx.data()) {
                        *o += k * xv;
                    }
                }
            }
        }
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a == b {
        return Some(a.to_vec());
    }
    let (na, nb) = (a.iter().product::<usize>(), b.iter().product::<usize>());
    if nb == 1 {
        return Some(a.to_vec());
    }
    if na == 1 {
        return Some(b.to_vec());
    }
    if a.len() != b.len() {
        return None;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Some(x),
            (1, _) => Some(y),
            (_, 1) => Some(x),
            _ => None,
        })
        .collect()
}

/// For each flat index of `out`, the flat index of the broadcast operand.
fn index_map(out: &[usize], operand: &[usize]) -> Vec<usize> {
    let n: usize = out.iter().product();
    if operand == out {
        return (0..n).collect();
    }
    if operand.iter().product::<usize>() == 1 {
        return vec![0; n];
    }
    let os = strides(operand);
    let eff: Vec<usize> = operand
        .iter()
        .zip(&os)
        .map(|(&d, &s)| if d == 1 { 0 } else { s })
        .collect();
    let mut idx = vec![0usize; out.len()];
    let mut map = Vec::with_capacity(n);
    for _ in 0..n {
        map.push(idx.iter().zip(&eff).map(|(&i, &s)| i * s).sum());
        for d in (0..out.len()).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

struct ReducePlan {
    out_shape: Vec<usize>,
    map: Vec<usize>,
    count: usize,
}

impl ReducePlan {
    fn new(shape: &[usize], axes: Option<&[usize]>) -> Result<Self> {
        let n: usize = shape.iter().product();
        let Some(axes) = axes else {
            return Ok(Self {
                out_shape: Vec::new(),
                map: vec![0; n],
                count: n,
            });
        };
        let mut reduced = vec![false; shape.len()];
        for &a in axes {
            if a >= shape.len() || reduced[a] {
                return Err(Error::shape(format!("bad reduce axes {axes:?} for {shape:?}")));
            }
            reduced[a] = true;
        }
        let out_shape: Vec<usize> = shape
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| !r)
            .map(|(&d, _)| d)
            .collect();
        let os = strides(&out_shape);
        let mut eff = Vec::with_capacity(shape.len());
        let mut k = 0;
        for &r in &reduced {
            if r {
                eff.push(0);
            } else {
                eff.push(os[k]);
                k += 1;
            }
        }
        let mut idx = vec![0usize; shape.len()];
        let mut map = Vec::with_capacity(n);
        for _ in 0..n {
            map.push(idx.iter().zip(&eff).map(|(&i, &s)| i * s).sum());
            for d in (0..shape.len()).rev() {
                idx[d] += 1;
                if idx[d] < shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        let count = shape
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| r)
            .map(|(&d, _)| d)
            .product();
        Ok(Self {
            out_shape,
            map,
            count,
        })
    }

    fn out_len(&self) -> usize {
        self.out_shape.iter().product()
    }
}

struct ConvGeometry {
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeometry {
    fn new(input: &[usize], weight: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if input.len() != 3 || weight.len() != 4 || input[0] != weight[1] || stride == 0 {
            return Err(Error::shape(format!(
                "conv2d: input {input:?}, weight {weight:?}, stride {stride}"
            )));
        }
        let (c, h, w) = (input[0], input[1], input[2]);
        let (o, kh, kw) = (weight[0], weight[2], weight[3]);
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}"
            )));
        }
        Ok(Self {
            c,
            h,
            w,
            o,
            kh,
            kw,
            oh: (h + 2 * padding - kh) / stride + 1,
            ow: (w + 2 * padding - kw) / stride + 1,
            stride,
            padding,
        })
    }

    /// Input coordinate for output position `out` and kernel offset `k`.
    #[inline]
    fn src(&self, out: usize, k: usize, limit: usize) -> Option<usize> {
        let pos = (out * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }

    fn patch_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// Visits every `(patch entry, input index)` pair of the unrolled
    /// patch matrix whose tap lands inside the unpadded input.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let p = self.positions();
        for c in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let r = (c * self.kh + ky) * self.kw + kx;
                    for oy in 0..self.oh {
                        let Some(iy) = self.src(oy, ky, self.h) else {
                            continue;
                        };
                        let base = (c * self.h + iy) * self.w;
                        for ox in 0..self.ow {
                            if let Some(ix) = self.src(ox, kx, self.w) {
                                f(r * p + oy * self.ow + ox, base + ix);
                            }
                        }
                    }
                }
            }
        }
    }

    /// `[C·kh·kw, oh·ow]` patch matrix, zeros where the tap is padding.
    fn im2col<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let mut col = vec![T::zero(); self.patch_rows() * self.positions()];
        self.for_each_tap(|ci, xi| col[ci] = x[xi]);
        col
    }

    fn forward<T: Scalar>(&self, x: &[T], wt: &[T]) -> Vec<T> {
        let (r, p) = (self.patch_rows(), self.positions());
        let col = self.im2col(x);
        let mut out = vec![T::zero(); self.o * p];
        for (orow, wrow) in out.chunks_exact_mut(p).zip(wt.chunks_exact(r)) {
            for (&wv, crow) in wrow.iter().zip(col.chunks_exact(p)) {
                for (ov, &cv) in orow.iter_mut().zip(crow) {
                    *ov += wv * cv;
                }
            }
        }
        out
    }

    fn backward_input<T: Scalar>(&self, g: &[T], wt: &[T], acc: &mut [T]) {
        let (r, p) = (self.patch_rows(), self.positions());
        let mut dcol = vec![T::zero(); r * p];
        for (grow, wrow) in g.chunks_exact(p).zip(wt.chunks_exact(r)) {
            for (&wv, drow) in wrow.iter().zip(dcol.chunks_exact_mut(p)) {
                for (dv, &gv) in drow.iter_mut().zip(grow) {
                    *dv += wv * gv;
                }
            }
        }
        self.for_each_tap(|ci, xi| acc[xi] += dcol[ci]);
    }

    fn backward_weight<T: Scalar>(&self, g: &[T], x: &[T], acc: &mut [T]) {
        let (r, p) = (self.patch_rows(), self.positions());
        let col = self.im2col(x);
        for (grow, arow) in g.chunks_exact(p).zip(acc.chunks_exact_mut(r)) {
            for (av, crow) in arow.iter_mut().zip(col.chunks_exact(p)) {
                let mut s = T::zero();
                for (&gv, &cv) in grow.iter().zip(crow) {
                    s += gv * cv;
                }
                *av += s;
            }
        }
    }
}

/// Value-only cosine similarity of two equal-length tensors.
pub fn cosine_similarity<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    let mut g = Graph::new();
    let va = g.constant(a.clone());
    let vb = g.constant(b.clone());
    let s = g.cosine_similarity(va, vb)?;
    g.scalar_value(s)
}
