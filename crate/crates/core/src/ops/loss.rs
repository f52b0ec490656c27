//! Cross-entropy against full target distributions.

use crate::error::{dim_err, Result};
use crate::ops::softmax::{log_softmax, softmax};
use crate::tensor::{finite_scalar, Scalar, Tensor};

/// Floor applied to predicted probabilities before taking their log.
pub const LOG_CLAMP: f64 = 1e-12;

fn check_pair<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, op: &str) -> Result<(usize, usize)> {
    let (n, k) = pred.dims2()?;
    if target.shape() != pred.shape() {
        return Err(dim_err!(
            "{op}: target shape {:?} != prediction shape {:?}",
            target.shape(),
            pred.shape()
        ));
    }
    Ok((n, k))
}

/// Mean over rows of `−Σ target · ln(max(pred, ε))`, with ε = [`LOG_CLAMP`].
pub fn cross_entropy_probs<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    let (n, _) = check_pair(pred, target, "cross_entropy")?;
    let eps = T::from_f64_lossy(LOG_CLAMP);
    let total = pred
        .data()
        .iter()
        .zip(target.data())
        .filter(|(_, &t)| t != T::zero())
        .fold(T::zero(), |acc, (&p, &t)| acc - t * p.max(eps).ln());
    finite_scalar(total / T::from_usize(n).unwrap(), "cross_entropy")
}

/// Gradient of [`cross_entropy_probs`] with respect to `pred`; zero where the
/// clamp is active.
pub fn cross_entropy_probs_backward<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, _) = check_pair(pred, target, "cross_entropy_backward")?;
    let eps = T::from_f64_lossy(LOG_CLAMP);
    let inv_n = T::one() / T::from_usize(n).unwrap();
    let mut grad = pred.zeros_like();
    for ((g, &p), &t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        if p >= eps {
            *g = -t / p * inv_n;
        }
    }
    grad.finite("cross_entropy_backward")
}

/// Mean over rows of the cross-entropy between `target` and `softmax(logits)`.
pub fn cross_entropy_logits<T: Scalar>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    let (n, _) = check_pair(logits, target, "cross_entropy_logits")?;
    let lp = log_softmax(logits, 1)?;
    let total = lp
        .data()
        .iter()
        .zip(target.data())
        .fold(T::zero(), |acc, (&l, &t)| acc - t * l);
    finite_scalar(total / T::from_usize(n).unwrap(), "cross_entropy_logits")
}

/// `(softmax(logits) − target) / N`.
pub fn cross_entropy_logits_backward<T: Scalar>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, _) = check_pair(logits, target, "cross_entropy_logits_backward")?;
    let mut p = softmax(logits, 1)?;
    let inv_n = T::one() / T::from_usize(n).unwrap();
    for (g, &t) in p.data_mut().iter_mut().zip(target.data()) {
        *g = (*g - t) * inv_n;
    }
    Ok(p)
}

/// One-hot rows for integer class labels.
pub fn one_hot<T: Scalar>(labels: &[usize], classes: usize) -> Result<Tensor<T>> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(dim_err!("label {bad} out of range for {classes} classes"));
    }
    let mut t = Tensor::zeros(&[labels.len(), classes])?;
    for (row, &l) in labels.iter().enumerate() {
        t.data_mut()[row * classes + l] = T::one();
    }
    Ok(t)
}

/// Index of the largest value per row; ties go to the lowest index.
pub fn argmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Vec<usize>> {
    let (_, k) = x.dims2()?;
    Ok(x.data()
        .chunks_exact(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, row[0]), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect())
}
