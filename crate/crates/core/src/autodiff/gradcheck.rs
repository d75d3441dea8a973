//! Central finite-difference gradient checks.

use super::{Graph, Tensor, Var};
use crate::error::Result;
use crate::scalar::Scalar;

/// Step used by [`max_relative_error`].
pub const DEFAULT_STEP: f64 = 1e-5;

/// `‖a − b‖ / (‖a‖ + ‖b‖)`, or the absolute difference when both are
/// (numerically) zero.
pub fn relative_error<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let sq = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = sq(&mut a.iter().zip(b).map(|(x, y)| x.as_f64() - y.as_f64()));
    let scale = sq(&mut a.iter().map(|x| x.as_f64()))
        + sq(&mut b.iter().map(|x| x.as_f64()));
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

/// Largest relative error, over all `inputs`, between the reverse-mode
/// gradient of the scalar built by `f` and central differences with step
/// `h`. Each input becomes a parameter leaf named `x{i}`.
pub fn max_relative_error<T: Scalar>(
    inputs: &[Tensor<T>],
    h: T,
    f: &dyn Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let eval = |xs: &[Tensor<T>]| -> Result<(Graph<T>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vs = xs
            .iter()
            .enumerate()
            .map(|(i, t)| g.param(&format!("x{i}"), t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let root = f(&mut g, &vs)?;
        Ok((g, vs, root))
    };
    let (g, vs, root) = eval(inputs)?;
    let grads = g.backward(root)?;
    let two_h = h + h;
    let mut worst: f64 = 0.0;
    for (i, v) in vs.iter().enumerate() {
        let analytic = grads.wrt(*v).data().to_vec();
        let mut numeric = Vec::with_capacity(analytic.len());
        for k in 0..inputs[i].len() {
            let bump = |d: T| -> Result<T> {
                let mut xs = inputs.to_vec();
                let mut data = xs[i].data().to_vec();
                data[k] += d;
                xs[i] = Tensor::new(xs[i].shape().to_vec(), data)?;
                let (g, _, r) = eval(&xs)?;
                g.scalar_value(r)
            };
            numeric.push((bump(h)? - bump(-h)?) / two_h);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}
