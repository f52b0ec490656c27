//! Softmax and log-softmax along an arbitrary axis.

use crate::error::{dim_err, Result};
use crate::tensor::{Scalar, Tensor};

/// (outer, axis length, inner) decomposition of `shape` around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(dim_err!("axis {axis} out of range for shape {shape:?}"));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn for_each_lane<T: Scalar>(
    shape: &[usize],
    axis: usize,
    mut f: impl FnMut(&mut dyn FnMut(usize) -> usize, usize),
) -> Result<()> {
    let (outer, len, inner) = axis_split(shape, axis)?;
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            f(&mut |j| base + j * inner, len);
        }
    }
    Ok(())
}

fn lane_max<T: Scalar>(x: &[T], idx: &mut dyn FnMut(usize) -> usize, len: usize) -> T {
    (0..len).fold(T::neg_infinity(), |m, j| m.max(x[idx(j)]))
}

/// Numerically stable softmax (max-subtracted) along `axis`.
pub fn softmax<T: Scalar>(logits: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    logits.check_finite("softmax input")?;
    let x = logits.data();
    let mut out = logits.zeros_like();
    let y = out.data_mut();
    for_each_lane::<T>(logits.shape(), axis, |idx, len| {
        let m = lane_max(x, idx, len);
        let mut total = T::zero();
        for j in 0..len {
            let e = (x[idx(j)] - m).exp();
            y[idx(j)] = e;
            total = total + e;
        }
        for j in 0..len {
            y[idx(j)] = y[idx(j)] / total;
        }
    })?;
    out.finite("softmax")
}

/// Log-softmax along `axis`, via the log-sum-exp of max-shifted logits.
pub fn log_softmax<T: Scalar>(logits: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    logits.check_finite("log_softmax input")?;
    let x = logits.data();
    let mut out = logits.zeros_like();
    let y = out.data_mut();
    for_each_lane::<T>(logits.shape(), axis, |idx, len| {
        let m = lane_max(x, idx, len);
        let lse = (0..len)
            .fold(T::zero(), |acc, j| acc + (x[idx(j)] - m).exp())
            .ln()
            + m;
        for j in 0..len {
            y[idx(j)] = x[idx(j)] - lse;
        }
    })?;
    out.finite("log_softmax")
}

/// Backward of softmax given its output `probs`: `p ⊙ (g − ⟨g, p⟩)`.
pub fn softmax_backward<T: Scalar>(probs: &Tensor<T>, grad_out: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    probs.ensure_same_shape(grad_out, "softmax_backward")?;
    let p = probs.data();
    let g = grad_out.data();
    let mut out = probs.zeros_like();
    let dx = out.data_mut();
    for_each_lane::<T>(probs.shape(), axis, |idx, len| {
        let inner = (0..len).fold(T::zero(), |acc, j| acc + g[idx(j)] * p[idx(j)]);
        for j in 0..len {
            dx[idx(j)] = p[idx(j)] * (g[idx(j)] - inner);
        }
    })?;
    out.finite("softmax_backward")
}

/// Backward of log-softmax given its output: `g − softmax · Σg`.
pub fn log_softmax_backward<T: Scalar>(
    log_probs: &Tensor<T>,
    grad_out: &Tensor<T>,
    axis: usize,
) -> Result<Tensor<T>> {
    log_probs.ensure_same_shape(grad_out, "log_softmax_backward")?;
    let lp = log_probs.data();
    let g = grad_out.data();
    let mut out = log_probs.zeros_like();
    let dx = out.data_mut();
    for_each_lane::<T>(log_probs.shape(), axis, |idx, len| {
        let total = (0..len).fold(T::zero(), |acc, j| acc + g[idx(j)]);
        for j in 0..len {
            dx[idx(j)] = g[idx(j)] - lp[idx(j)].exp() * total;
        }
    })?;
    out.finite("log_softmax_backward")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_uniform_probs() {
        let z = Tensor::<f64>::zeros(&[4]).unwrap();
        assert_eq!(softmax(&z, 0).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn ln3_gap_gives_three_to_one() {
        let z = Tensor::<f64>::new(vec![2], vec![3f64.ln(), 0.0]).unwrap();
        let p = softmax(&z, 0).unwrap();
        assert!((p.data()[0] - 0.75).abs() < 1e-12);
        assert!((p.data()[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let z = Tensor::<f32>::new(vec![2], vec![1000.0, 0.0]).unwrap();
        let p = softmax(&z, 0).unwrap();
        assert!((p.data()[0] - 1.0).abs() < 1e-6 && p.data()[1] < 1e-6);
        let lp = log_softmax(&z, 0).unwrap();
        assert!(lp.data()[0].abs() < 1e-6 && (lp.data()[1] + 1000.0).abs() < 1e-3);
    }

    #[test]
    fn inner_axis_normalizes_per_lane() {
        // shape 2×3×2, softmax over axis 1
        let z = Tensor::<f64>::from_fn(&[2, 3, 2], |i| (i as f64 * 0.7).sin() * 5.0).unwrap();
        let p = softmax(&z, 1).unwrap();
        for o in 0..2 {
            for i in 0..2 {
                let s: f64 = (0..3).map(|j| p.data()[o * 6 + j * 2 + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        assert!(softmax(&z, 3).is_err());
    }
}
