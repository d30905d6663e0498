//! Finite-difference gradient oracle.
//!
//! Every trainable operation in the repository is validated against central
//! differences through this harness; the reverse-mode tape in [`crate::graph`]
//! is never trusted on its own.

use crate::error::CoreError;
use crate::tensor::Tensor;
use crate::Result;

/// A scalar-valued function of a tensor together with its analytic gradient.
pub trait Differentiable {
    fn value(&self, point: &Tensor<f64>) -> Result<f64>;
    fn gradient(&self, point: &Tensor<f64>) -> Result<Tensor<f64>>;
}

/// Convenience adapter over closures.
pub struct FnPair<V, G> {
    pub value: V,
    pub gradient: G,
}

impl<V, G> Differentiable for FnPair<V, G>
where
    V: Fn(&Tensor<f64>) -> Result<f64>,
    G: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    fn value(&self, point: &Tensor<f64>) -> Result<f64> {
        (self.value)(point)
    }
    fn gradient(&self, point: &Tensor<f64>) -> Result<Tensor<f64>> {
        (self.gradient)(point)
    }
}

/// Central finite differences per coordinate; returns the max over
/// coordinates of `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<D: Differentiable>(f: &D, point: &Tensor<f64>, step: f64) -> Result<f64> {
    let analytic = f.gradient(point)?;
    if analytic.shape() != point.shape() {
        return Err(CoreError::ShapeMismatch {
            op: "grad_check",
            detail: alloc::format!(
                "gradient shape {:?} != point shape {:?}",
                analytic.shape(),
                point.shape()
            ),
        });
    }
    let mut worst = 0.0f64;
    let mut x = point.clone();
    for i in 0..point.len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + step;
        let up = f.value(&x)?;
        x.data_mut()[i] = orig - step;
        let down = f.value(&x)?;
        x.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(CoreError::NonFinite { op: "grad_check" });
        }
        let numeric = (up - down) / (2.0 * step);
        let a = analytic.data()[i];
        let denom = 1.0f64.max(a.abs()).max(numeric.abs());
        let rel = (a - numeric).abs() / denom;
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}
