use super::Tensor;
use crate::error::{Error, Result};

/// Magnitudes below this are compared absolutely in [`max_relative_error`].
/// Central differences carry O(h²·f''') truncation error, which swamps a
/// purely relative comparison on near-zero gradient entries.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-3;

/// Central-difference gradient of a scalar function at `x`:
/// `(f(x + h·e_k) − f(x − h·e_k)) / 2h` for every coordinate `k`.
///
/// `f` receives constant tensors shaped like `x`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(h > 0.0 && h <= 1e-2) {
        return Err(Error::InvalidArgument(format!("step h = {h} outside (0, 1e-2]")));
    }
    let base = x.to_vec();
    let mut grad = Vec::with_capacity(base.len());
    let mut probe = base.clone();
    for k in 0..base.len() {
        probe[k] = base[k] + h;
        let plus = f(&Tensor::new(probe.clone(), x.shape())?)?;
        probe[k] = base[k] - h;
        let minus = f(&Tensor::new(probe.clone(), x.shape())?)?;
        probe[k] = base[k];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite);
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Tensor::new(grad, x.shape())
}

/// `max_k |a_k − n_k| / max(|a_k|, |n_k|, RELATIVE_ERROR_FLOOR)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(RELATIVE_ERROR_FLOOR))
        .fold(0.0, f64::max)
}
