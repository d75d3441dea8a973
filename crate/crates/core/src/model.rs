//! Small convolutional encoder with a linear classifier head.
//!
//! Layout: inputs rescaled from `[0, 1]` to `[-1, 1]`, `blocks.len()` conv layers (zero padding `kernel/2`, bias,
//! relu), global average pooling, a linear projection to the embedding,
//! and a linear head from the embedding to class logits. There is no
//! batch coupling, so every image is processed independently.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{accumulate, scale_gradients, GradientMap, Graph, ParameterSet, Tensor, Var};
use crate::error::{Error, Result};
use crate::imaging::ImageRgb;
use crate::losses::{cross_entropy, SupervisedObjective};
use crate::scalar::Scalar;
use crate::seed::{rng_for, stream};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvBlock {
    pub channels: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
}

fn default_kernel() -> usize {
    3
}

fn default_stride() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub input_size: usize,
    pub blocks: Vec<ConvBlock>,
    pub embedding_dim: usize,
    pub class_count: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_size: 32,
            blocks: [8, 16, 32]
                .into_iter()
                .map(|channels| ConvBlock {
                    channels,
                    kernel: 3,
                    stride: 2,
                })
                .collect(),
            embedding_dim: 32,
            class_count: 3,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::contract("encoder needs at least one conv block"));
        }
        if self.embedding_dim < 2 {
            return Err(Error::contract("embedding_dim must be >= 2"));
        }
        if self.class_count < 2 {
            return Err(Error::contract("class_count must be >= 2"));
        }
        let mut side = self.input_size;
        for b in &self.blocks {
            if b.channels == 0 || b.kernel == 0 || b.stride == 0 {
                return Err(Error::contract("conv block sizes must be positive"));
            }
            let pad = b.kernel / 2;
            if side + 2 * pad < b.kernel {
                return Err(Error::contract(format!(
                    "input size {} collapses before block with kernel {}",
                    self.input_size, b.kernel
                )));
            }
            side = (side + 2 * pad - b.kernel) / b.stride + 1;
        }
        Ok(())
    }

    /// Expected `(name, shape)` of every parameter, in declaration order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut c_in = 3;
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("conv{i}.weight"), vec![b.channels, c_in, b.kernel, b.kernel]));
            out.push((format!("conv{i}.bias"), vec![b.channels, 1, 1]));
            c_in = b.channels;
        }
        out.push(("proj.weight".into(), vec![self.embedding_dim, c_in]));
        out.push(("proj.bias".into(), vec![self.embedding_dim]));
        out.push(("head.weight".into(), vec![self.class_count, self.embedding_dim]));
        out.push(("head.bias".into(), vec![self.class_count]));
        out
    }

    pub fn with_class_count(&self, c: usize) -> Self {
        Self {
            class_count: c,
            ..self.clone()
        }
    }
}

fn is_head(name: &str) -> bool {
    name.starts_with("head.")
}

#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: EncoderConfig,
}

/// Graph nodes produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardNodes {
    /// Unnormalized embedding, `[embedding_dim]`.
    pub embedding: Var,
    /// `[class_count]`.
    pub logits: Var,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// He-normal weights, zero biases.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> Result<ParameterSet<T>> {
        let mut set = ParameterSet::new();
        for (name, shape) in self.cfg.parameter_shapes() {
            set.insert(&name, init_tensor(&name, &shape, seed)?)?;
        }
        Ok(set)
    }

    /// Replaces the classifier head with a fresh one for `class_count`
    /// classes, keeping every encoder weight.
    pub fn reinit_head<T: Scalar>(&self, params: &ParameterSet<T>, seed: u64) -> Result<ParameterSet<T>> {
        let mut out = ParameterSet::new();
        for (name, t) in params.iter() {
            if !is_head(name) {
                out.insert(name, t.clone())?;
            }
        }
        for (name, shape) in self.cfg.parameter_shapes() {
            if is_head(&name) {
                out.insert(&name, init_tensor(&name, &shape, seed)?)?;
            }
        }
        self.check_params(&out)?;
        Ok(out)
    }

    pub fn check_params<T: Scalar>(&self, params: &ParameterSet<T>) -> Result<()> {
        let want = self.cfg.parameter_shapes();
        if params.len() != want.len() {
            return Err(Error::contract(format!(
                "expected {} parameters, found {}",
                want.len(),
                params.len()
            )));
        }
        for (name, shape) in want {
            match params.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::contract(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::contract(format!("missing parameter {name}"))),
            }
        }
        Ok(())
    }

    pub fn check_input<T: Scalar>(&self, x: &Tensor<T>) -> Result<()> {
        let s = self.cfg.input_size;
        if x.shape() != [3, s, s] {
            return Err(Error::contract(format!(
                "input shape {:?}, expected [3, {s}, {s}]",
                x.shape()
            )));
        }
        Ok(())
    }

    /// Builds the forward pass of one `[3, H, W]` image into `g`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &BTreeMap<String, Var>,
        input: Var,
    ) -> Result<ForwardNodes> {
        self.check_input(g.value(input))?;
        let get = |n: &str| {
            p.get(n)
                .copied()
                .ok_or_else(|| Error::contract(format!("missing parameter {n}")))
        };
        // Pixel values in [0, 1] are centered to [-1, 1].
        let scaled = g.scale(input, T::lit(2.0))?;
        let mut h = g.add_scalar(scaled, -T::one())?;
        for (i, b) in self.cfg.blocks.iter().enumerate() {
            let c = g.conv2d(h, get(&format!("conv{i}.weight"))?, b.stride, b.kernel / 2)?;
            let c = g.add(c, get(&format!("conv{i}.bias"))?)?;
            h = g.relu(c)?;
        }
        let pooled = g.mean_axes(h, &[1, 2])?;
        let e = g.matmul(get("proj.weight")?, pooled)?;
        let embedding = g.add(e, get("proj.bias")?)?;
        let l = g.matmul(get("head.weight")?, embedding)?;
        let logits = g.add(l, get("head.bias")?)?;
        Ok(ForwardNodes { embedding, logits })
    }

    /// Evaluates one image: L2-normalized embedding and logits.
    pub fn infer<T: Scalar>(&self, params: &ParameterSet<T>, x: &Tensor<T>) -> Result<(Vec<T>, Vec<T>)> {
        let mut g = Graph::new();
        let p = g.params_from(params)?;
        let input = g.constant(x.clone());
        let f = self.forward(&mut g, &p, input)?;
        let z = g.normalize(f.embedding)?;
        Ok((g.value(z).data().to_vec(), g.value(f.logits).data().to_vec()))
    }

    /// Batch version of [`Encoder::infer`]; images are independent.
    pub fn encoder_forward<T: Scalar>(
        &self,
        params: &ParameterSet<T>,
        images: &[Arc<Tensor<T>>],
    ) -> Result<(Vec<Vec<T>>, Vec<Vec<T>>)> {
        let mut emb = Vec::with_capacity(images.len());
        let mut logits = Vec::with_capacity(images.len());
        for x in images {
            let (e, l) = self.infer(params, x)?;
            emb.push(e);
            logits.push(l);
        }
        Ok((emb, logits))
    }

    pub fn predict<T: Scalar>(&self, params: &ParameterSet<T>, x: &Tensor<T>) -> Result<usize> {
        let (_, logits) = self.infer(params, x)?;
        Ok(argmax(&logits))
    }
}

/// Index of the largest value; the first wins on ties.
pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn init_tensor<T: Scalar>(name: &str, shape: &[usize], seed: u64) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    if name.ends_with(".bias") {
        return Ok(Tensor::zeros(shape));
    }
    let fan_in: usize = shape[1..].iter().product();
    let gain = if name.starts_with("conv") { 2.0 } else { 1.0 };
    let std = (gain / fan_in as f64).sqrt();
    let name_hash = name.bytes().fold(0xcbf29ce484222325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100000001b3)
    });
    let mut rng = rng_for(seed, &[stream::INIT, name_hash]);
    let dist = Normal::new(0.0, std).map_err(|e| Error::contract(e.to_string()))?;
    let data: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng)).collect();
    Tensor::from_f64(shape.to_vec(), &data)
}

pub fn image_tensor<T: Scalar>(img: &ImageRgb) -> Tensor<T> {
    img.to_tensor()
}

/// Preprocessed inputs with labels for the supervised objective.
#[derive(Clone, Debug, Default)]
pub struct ImageBatch<T> {
    pub inputs: Vec<Arc<Tensor<T>>>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> ImageBatch<T> {
    pub fn from_images<'a>(items: impl IntoIterator<Item = (&'a ImageRgb, usize)>) -> Self {
        let mut b = Self {
            inputs: Vec::new(),
            labels: Vec::new(),
        };
        for (img, y) in items {
            b.inputs.push(Arc::new(image_tensor(img)));
            b.labels.push(y);
        }
        b
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Mean cross-entropy of the encoder's logits over an [`ImageBatch`].
/// Each image gets its own graph; per-image gradients are summed in
/// batch order and then scaled by `1/B`.
impl<T: Scalar> SupervisedObjective<T> for Encoder {
    type Batch = ImageBatch<T>;

    fn loss_and_grad(&self, params: &ParameterSet<T>, batch: &ImageBatch<T>) -> Result<(T, GradientMap<T>)> {
        if batch.is_empty() || batch.inputs.len() != batch.labels.len() {
            return Err(Error::contract("empty or ragged image batch"));
        }
        let mut total = T::zero();
        let mut grad = GradientMap::new();
        for (x, &y) in batch.inputs.iter().zip(&batch.labels) {
            let mut g = Graph::new();
            let p = g.params_from(params)?;
            let input = g.constant((**x).clone());
            let f = self.forward(&mut g, &p, input)?;
            let loss = cross_entropy(&mut g, &[f.logits], &[y])?;
            total += g.scalar_value(loss)?;
            accumulate(&mut grad, &g.backward(loss)?.by_name(), T::one());
        }
        let inv = T::one() / T::lit(batch.len() as f64);
        scale_gradients(&mut grad, inv);
        Ok((total * inv, grad))
    }

    /// Same value as [`loss_and_grad`](Self::loss_and_grad), without the
    /// backward pass.
    fn loss(&self, params: &ParameterSet<T>, batch: &ImageBatch<T>) -> Result<T> {
        if batch.is_empty() || batch.inputs.len() != batch.labels.len() {
            return Err(Error::contract("empty or ragged image batch"));
        }
        let mut total = T::zero();
        for (x, &y) in batch.inputs.iter().zip(&batch.labels) {
            let mut g = Graph::new();
            let p = g.params_from(params)?;
            let input = g.constant((**x).clone());
            let f = self.forward(&mut g, &p, input)?;
            let loss = cross_entropy(&mut g, &[f.logits], &[y])?;
            total += g.scalar_value(loss)?;
        }
        Ok(total * (T::one() / T::lit(batch.len() as f64)))
    }
}
