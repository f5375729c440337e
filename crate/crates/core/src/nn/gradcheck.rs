//! Central finite-difference gradients, used as an independent oracle for
//! [`Graph::backward`](super::Graph::backward).

use super::{ParamId, ParameterStore, Tensor};
use crate::error::Result;

/// Numerical gradient of `f` with respect to each parameter in `ids`, by
/// central differences with step `h`.
pub fn finite_difference<F>(store: &mut ParameterStore, ids: &[ParamId], h: f64, mut f: F) -> Result<Vec<Tensor>>
where
    F: FnMut(&ParameterStore) -> Result<f64>,
{
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        let n = store.value(id).numel();
        let mut grad = Tensor::zeros(store.value(id).shape());
        for i in 0..n {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + h;
            let plus = f(store)?;
            store.value_mut(id).data_mut()[i] = orig - h;
            let minus = f(store)?;
            store.value_mut(id).data_mut()[i] = orig;
            grad.data_mut()[i] = (plus - minus) / (2.0 * h);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Relative error `|a - b| / max(|a|, |b|, floor)`; the floor keeps
/// near-zero gradients from amplifying round-off.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest [`relative_error`] over all entries of paired tensors.
pub fn max_relative_error(analytic: &[Tensor], numeric: &[Tensor], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.data().iter().zip(n.data()).map(|(&x, &y)| relative_error(x, y, floor)))
        .fold(0.0, f64::max)
}
