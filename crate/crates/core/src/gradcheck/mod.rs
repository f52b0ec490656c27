//! Central finite differences, the reference every analytic backward is
//! checked against.

mod suite;

pub use suite::{run_suite, OpReport, SuiteReport, OPS, TOLERANCE};

use crate::error::Result;
use crate::tensor::{Gradient, Tensor};

/// Step used by the verification suite.
pub const DEFAULT_STEP: f64 = 1e-5;

/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every element `i` of `input`.
pub fn finite_difference_gradient<F>(mut f: F, input: &Tensor<f64>, h: f64) -> Result<Gradient<f64>>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    let mut probe = input.clone();
    let mut grad = input.zeros_like();
    for i in 0..input.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// `max|a − b| / max(max|a|, max|b|)`, the scale-aware error used for every
/// gradient comparison. Two all-zero inputs compare as 0.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "relative_error: length mismatch");
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::from_fn(&[5], |i| i as f64 - 2.0).unwrap();
        let g = finite_difference_gradient(|t| Ok(t.sum()), &x, DEFAULT_STEP).unwrap();
        assert!(g.data().iter().all(|&v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn half_squared_norm_has_identity_gradient() {
        let x = Tensor::from_fn(&[6], |i| (i as f64 * 1.3).cos()).unwrap();
        let g = finite_difference_gradient(|t| Ok(0.5 * t.dot(t)?), &x, DEFAULT_STEP).unwrap();
        assert!(relative_error(g.data(), x.data()) < 1e-9);
    }
}
