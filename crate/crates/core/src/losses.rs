//! Training objectives: pairwise contrastive, multi-positive InfoNCE,
//! cross-entropy, and the guided-tuning total built from inner SGD steps.
//!
//! The contrastive losses follow their printed forms literally: the
//! pairwise denominator runs over every embedding including the anchor,
//! and the multi-positive denominator runs over the other samples only,
//! so that loss can go negative. `standard_denominator` switches the
//! latter to the conventional form with the positive included.

use serde::{Deserialize, Serialize};

use crate::autodiff::{accumulate, GradientMap, Graph, ParameterSet, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Embeddings of one batch as graph nodes: `originals[i]` is `z_i` and
/// `views[i]` holds the augmented-view embeddings of sample `i`.
#[derive(Clone, Debug)]
pub struct EmbeddingBatch<T> {
    pub originals: Vec<Var>,
    pub views: Vec<Vec<Var>>,
    pub temperature: T,
}

impl<T: Scalar> EmbeddingBatch<T> {
    fn check_temperature(&self) -> Result<()> {
        if !(self.temperature > T::zero()) {
            return Err(Error::contract(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

fn scaled_similarity<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var, tau: T) -> Result<Var> {
    let s = g.cosine_similarity(a, b)?;
    g.scale(s, T::one() / tau)
}

/// `-log( exp(sim(z_i, z_j)/τ) / Σ_k exp(sim(z_i, z_k)/τ) )` with `k`
/// over every original embedding, `i` included.
pub fn contrastive_loss<T: Scalar>(
    g: &mut Graph<T>,
    i: usize,
    j: usize,
    batch: &EmbeddingBatch<T>,
) -> Result<Var> {
    batch.check_temperature()?;
    let z = &batch.originals;
    if z.len() < 2 {
        return Err(Error::NoNegatives);
    }
    if i == j || i >= z.len() || j >= z.len() {
        return Err(Error::contract(format!("bad anchor/positive pair ({i}, {j})")));
    }
    let tau = batch.temperature;
    let sims = z
        .iter()
        .map(|&zk| scaled_similarity(g, z[i], zk, tau))
        .collect::<Result<Vec<_>>>()?;
    let lse = g.log_sum_exp(&sims)?;
    g.sub(lse, sims[j])
}

/// Multi-positive InfoNCE for anchor `i`:
/// `-1/(N+1) Σ_{k=0..N} log( exp(sim(ẑ_i^k, z_i)/τ) / Σ_{j≠i} exp(sim(ẑ_i^k, z_j)/τ) )`
/// where `ẑ_i^0 = z_i` and the `ẑ_i^k` are the views of sample `i`. The
/// denominator covers the originals of the other samples only, unless
/// `standard_denominator` adds the positive term.
pub fn multi_positive_infonce<T: Scalar>(
    g: &mut Graph<T>,
    i: usize,
    batch: &EmbeddingBatch<T>,
    standard_denominator: bool,
) -> Result<Var> {
    batch.check_temperature()?;
    let z = &batch.originals;
    if z.len() < 2 {
        return Err(Error::NoNegatives);
    }
    let views = batch
        .views
        .get(i)
        .ok_or_else(|| Error::contract(format!("anchor {i} has no view list")))?;
    if views.is_empty() {
        return Err(Error::contract(format!("anchor {i} has no views")));
    }
    let tau = batch.temperature;
    let anchors: Vec<Var> = std::iter::once(z[i]).chain(views.iter().copied()).collect();
    let mut terms = Vec::with_capacity(anchors.len());
    for &a in &anchors {
        let pos = scaled_similarity(g, a, z[i], tau)?;
        let mut denom = Vec::with_capacity(z.len());
        if standard_denominator {
            denom.push(pos);
        }
        for (j, &zj) in z.iter().enumerate() {
            if j != i {
                denom.push(scaled_similarity(g, a, zj, tau)?);
            }
        }
        let lse = g.log_sum_exp(&denom)?;
        terms.push(g.sub(pos, lse)?);
    }
    let total = g.add_all(&terms)?;
    let alpha = T::one() / T::lit(anchors.len() as f64);
    g.scale(total, -alpha)
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`, via a
/// max-shifted log-sum-exp. Each logit node is a `[C]` vector.
pub fn cross_entropy<T: Scalar>(g: &mut Graph<T>, logits: &[Var], labels: &[usize]) -> Result<Var> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(Error::contract(format!(
            "{} logit rows for {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let mut per = Vec::with_capacity(logits.len());
    for (&l, &y) in logits.iter().zip(labels) {
        let c = g.value(l).len();
        if y >= c {
            return Err(Error::LabelOutOfRange { label: y, classes: c });
        }
        let m = g
            .value(l)
            .data()
            .iter()
            .fold(T::neg_infinity(), |a, &b| a.max(b));
        let shifted = g.add_scalar(l, -m)?;
        let e = g.exp(shifted)?;
        let s = g.sum(e)?;
        let log_s = g.log(s)?;
        let lse = g.add_scalar(log_s, m)?;
        let mut onehot = vec![T::zero(); c];
        onehot[y] = T::one();
        let hot = g.constant(Tensor::new(g.value(l).shape().to_vec(), onehot)?);
        let picked = g.dot(l, hot)?;
        per.push(g.sub(lse, picked)?);
    }
    let total = g.add_all(&per)?;
    g.scale(total, T::one() / T::lit(logits.len() as f64))
}

/// A supervised loss `L_o(batch; θ)` with its gradient.
pub trait SupervisedObjective<T: Scalar> {
    type Batch;

    fn loss_and_grad(&self, params: &ParameterSet<T>, batch: &Self::Batch) -> Result<(T, GradientMap<T>)>;

    fn loss(&self, params: &ParameterSet<T>, batch: &Self::Batch) -> Result<T> {
        Ok(self.loss_and_grad(params, batch)?.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidedLossConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub k: usize,
    pub inner_lr: f64,
}

impl Default for GuidedLossConfig {
    fn default() -> Self {
        Self {
            beta1: 0.5,
            beta2: 0.5,
            k: 2,
            inner_lr: 0.05,
        }
    }
}

impl GuidedLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta1 >= 0.0 && self.beta2 >= 0.0) {
            return Err(Error::contract("beta1 and beta2 must be >= 0"));
        }
        if self.k < 1 {
            return Err(Error::contract("K must be >= 1"));
        }
        if !(self.inner_lr >= 0.0) || !self.inner_lr.is_finite() {
            return Err(Error::contract("inner_lr must be >= 0"));
        }
        Ok(())
    }
}

/// `θ̂ = θ - α ∇_θ L_o(adapt_batch; θ)`.
pub fn inner_meta_step<T: Scalar, M: SupervisedObjective<T>>(
    model: &M,
    params: &ParameterSet<T>,
    adapt_batch: &M::Batch,
    inner_lr: T,
) -> Result<ParameterSet<T>> {
    let (_, grad) = model.loss_and_grad(params, adapt_batch)?;
    params.sgd_step(&grad, inner_lr)
}

#[derive(Clone, Debug)]
pub struct GuidedLoss<T> {
    /// `L_total`.
    pub total: T,
    /// `L_o(target; θ)`.
    pub target_loss: T,
    /// `L_o(target; θ̂_j)` per meta-domain; empty when `beta1 == 0`.
    pub meta_target_losses: Vec<T>,
    /// `L_o(adapt_j; θ̂_j)` per meta-domain; empty when `beta2 == 0`.
    pub meta_adapt_losses: Vec<T>,
    /// First-order update direction for `θ`.
    pub gradient: GradientMap<T>,
}

/// Guided-tuning objective
/// `L_o(target; θ) + β1/K Σ_j L_o(target; θ̂_j) + β2/K Σ_j L_o(adapt_j; θ̂_j)`
/// with `θ̂_j` one inner SGD step on `adapt_j` from `θ`.
///
/// The gradient is first-order: each `θ̂_j` term contributes its gradient
/// evaluated at `θ̂_j`, with the inner step's Jacobian taken as identity.
/// A term whose weight is zero is not evaluated, so `β1 = β2 = 0` is
/// exactly the plain cross-entropy step.
pub fn guided_total_loss<T: Scalar, M: SupervisedObjective<T>>(
    model: &M,
    params: &ParameterSet<T>,
    target_batch: &M::Batch,
    adapt_batches: &[M::Batch],
    cfg: &GuidedLossConfig,
) -> Result<GuidedLoss<T>> {
    cfg.validate()?;
    if adapt_batches.len() != cfg.k {
        return Err(Error::contract(format!(
            "expected {} adapt batches, got {}",
            cfg.k,
            adapt_batches.len()
        )));
    }
    let (target_loss, mut gradient) = model.loss_and_grad(params, target_batch)?;
    let mut total = target_loss;
    let mut meta_target_losses = Vec::new();
    let mut meta_adapt_losses = Vec::new();
    if cfg.beta1 == 0.0 && cfg.beta2 == 0.0 {
        return Ok(GuidedLoss {
            total,
            target_loss,
            meta_target_losses,
            meta_adapt_losses,
            gradient,
        });
    }
    let k = T::lit(cfg.k as f64);
    let w1 = T::lit(cfg.beta1) / k;
    let w2 = T::lit(cfg.beta2) / k;
    let inner_lr = T::lit(cfg.inner_lr);
    for adapt in adapt_batches {
        let theta_hat = inner_meta_step(model, params, adapt, inner_lr)?;
        if cfg.beta1 > 0.0 {
            let (l, g) = model.loss_and_grad(&theta_hat, target_batch)?;
            total += w1 * l;
            accumulate(&mut gradient, &g, w1);
            meta_target_losses.push(l);
        }
        if cfg.beta2 > 0.0 {
            let (l, g) = model.loss_and_grad(&theta_hat, adapt)?;
            total += w2 * l;
            accumulate(&mut gradient, &g, w2);
            meta_adapt_losses.push(l);
        }
    }
    Ok(GuidedLoss {
        total,
        target_loss,
        meta_target_losses,
        meta_adapt_losses,
        gradient,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_var(g: &mut Graph<f64>, v: &[f64]) -> Var {
        g.constant(Tensor::vector(v.to_vec()).unwrap())
    }

    #[test]
    fn pairwise_closed_form() {
        let mut g = Graph::new();
        let zi = vec_var(&mut g, &[1.0, 0.0]);
        let zj = vec_var(&mut g, &[1.0, 0.0]);
        let zk = vec_var(&mut g, &[0.0, 1.0]);
        let b = EmbeddingBatch {
            originals: vec![zi, zj, zk],
            views: vec![],
            temperature: 1.0,
        };
        let l = contrastive_loss(&mut g, 0, 1, &b).unwrap();
        let e = std::f64::consts::E;
        let want = -(e / (e + e + 1.0)).ln();
        assert!((g.scalar_value(l).unwrap() - want).abs() < 1e-12);
        assert!((want - (2.0 + 1.0 / e).ln()).abs() < 1e-12);
    }

    #[test]
    fn pairwise_symmetric_case_is_log_n() {
        for n in 2..6 {
            let mut g = Graph::new();
            let z: Vec<Var> = (0..n).map(|_| vec_var(&mut g, &[0.3, -0.2, 0.9])).collect();
            for tau in [0.05, 1.0, 7.0] {
                let b = EmbeddingBatch {
                    originals: z.clone(),
                    views: vec![],
                    temperature: tau,
                };
                let l = contrastive_loss(&mut g, 0, 1, &b).unwrap();
                assert!((g.scalar_value(l).unwrap() - (n as f64).ln()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn infonce_closed_forms() {
        let mut g = Graph::new();
        let zi = vec_var(&mut g, &[1.0, 0.0]);
        let v = vec_var(&mut g, &[1.0, 0.0]);
        let zj = vec_var(&mut g, &[0.0, 1.0]);
        let b = EmbeddingBatch {
            originals: vec![zi, zj],
            views: vec![vec![v], vec![]],
            temperature: 1.0,
        };
        let l = multi_positive_infonce(&mut g, 0, &b, false).unwrap();
        assert!((g.scalar_value(l).unwrap() + 1.0).abs() < 1e-12);

        // View orthogonal to z_i and aligned with the negative. The k=0
        // term keeps sim(z_i, z_i) = 1, so -1/2 [(1 - 0) + (0 - 1)] = 0.
        let w = vec_var(&mut g, &[0.0, 1.0]);
        let b2 = EmbeddingBatch {
            originals: vec![zi, zj],
            views: vec![vec![w], vec![]],
            temperature: 1.0,
        };
        let l2 = multi_positive_infonce(&mut g, 0, &b2, false).unwrap();
        assert!(g.scalar_value(l2).unwrap().abs() < 1e-12);
    }

    #[test]
    fn infonce_needs_negatives() {
        let mut g = Graph::new();
        let zi = vec_var(&mut g, &[1.0, 0.0]);
        let b = EmbeddingBatch {
            originals: vec![zi],
            views: vec![vec![zi]],
            temperature: 1.0,
        };
        assert!(matches!(
            multi_positive_infonce(&mut g, 0, &b, false),
            Err(Error::NoNegatives)
        ));
    }

    #[test]
    fn cross_entropy_cases() {
        let mut g = Graph::new();
        let peaked = vec_var(&mut g, &[100.0, 0.0, 0.0]);
        let l = cross_entropy(&mut g, &[peaked], &[0]).unwrap();
        assert!(g.scalar_value(l).unwrap() < 1e-6);

        let flat = vec_var(&mut g, &[0.0, 0.0]);
        let a = cross_entropy(&mut g, &[flat], &[0]).unwrap();
        let b = cross_entropy(&mut g, &[flat], &[1]).unwrap();
        let (a, b) = (g.scalar_value(a).unwrap(), g.scalar_value(b).unwrap());
        assert!((a - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(a, b);

        assert!(matches!(
            cross_entropy(&mut g, &[flat], &[2]),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::vector(vec![0.3, -1.2, 2.0]).unwrap()).unwrap();
        let l = cross_entropy(&mut g, &[x], &[1]).unwrap();
        let grad = g.backward(l).unwrap().by_name()["x"].clone();
        let e: Vec<f64> = [0.3f64, -1.2, 2.0].iter().map(|v| v.exp()).collect();
        let s: f64 = e.iter().sum();
        for (c, gv) in grad.data().iter().enumerate() {
            let want = e[c] / s - if c == 1 { 1.0 } else { 0.0 };
            assert!((gv - want).abs() < 1e-12);
        }
    }
}
