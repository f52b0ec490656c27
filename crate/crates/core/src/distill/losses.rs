//! Distillation losses and the spatial matching applied before them.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, dim_err, Result};
use crate::ops::{self, LOG_CLAMP};
use crate::tensor::{finite_scalar, Scalar, Tensor};
use crate::vocab::AssignmentMap;

/// Which input of [`spatial_match`] was pooled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooled {
    Neither,
    First,
    Second,
}

/// Average-pools the spatially larger of two N×C×H×W maps down to the
/// extent of the smaller. Returns the pair and which side was pooled.
pub fn spatial_match<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Pooled)> {
    let (na, _, ha, wa) = a.dims4()?;
    let (nb, _, hb, wb) = b.dims4()?;
    if na != nb {
        return Err(dim_err!("spatial_match: batch sizes {na} and {nb} differ"));
    }
    if (ha, wa) == (hb, wb) {
        Ok((a.clone(), b.clone(), Pooled::Neither))
    } else if ha >= hb && wa >= wb {
        Ok((ops::adaptive_avg_pool(a, hb, wb)?, b.clone(), Pooled::First))
    } else if hb >= ha && wb >= wa {
        Ok((a.clone(), ops::adaptive_avg_pool(b, ha, wa)?, Pooled::Second))
    } else {
        Err(config_err!(
            "cannot match {ha}x{wa} with {hb}x{wb}: neither map is larger on both axes"
        ))
    }
}

fn check_maps<T: Scalar>(p_t: &AssignmentMap<T>, p_s: &AssignmentMap<T>) -> Result<(usize, usize)> {
    if p_t.probs.shape() != p_s.probs.shape() {
        return Err(dim_err!(
            "teacher assignments {:?} vs student assignments {:?}",
            p_t.probs.shape(),
            p_s.probs.shape()
        ));
    }
    let (n, ..) = p_s.dims();
    Ok((n, p_s.probs.len()))
}

/// `Σ_{h,w} KL(p_T ‖ p_S)` per sample, averaged over the batch. Student
/// probabilities are floored at [`LOG_CLAMP`] inside the log.
pub fn kl_distill_loss<T: Scalar>(p_t: &AssignmentMap<T>, p_s: &AssignmentMap<T>) -> Result<T> {
    let (n, _) = check_maps(p_t, p_s)?;
    let eps = T::from_f64_lossy(LOG_CLAMP);
    let total = p_t
        .probs
        .data()
        .iter()
        .zip(p_s.probs.data())
        .filter(|(&t, _)| t > T::zero())
        .fold(T::zero(), |acc, (&t, &s)| acc + t * (t.ln() - s.max(eps).ln()));
    finite_scalar(total / T::from_usize(n).unwrap(), "kl_distill_loss")
}

/// Gradient of [`kl_distill_loss`] with respect to the student
/// probabilities: `−p_T / p_S / N`, zero where the clamp is active.
pub fn kl_distill_loss_backward<T: Scalar>(p_t: &AssignmentMap<T>, p_s: &AssignmentMap<T>) -> Result<Tensor<T>> {
    let (n, _) = check_maps(p_t, p_s)?;
    let eps = T::from_f64_lossy(LOG_CLAMP);
    let inv_n = T::one() / T::from_usize(n).unwrap();
    let mut grad = p_s.probs.zeros_like();
    for ((g, &t), &s) in grad.data_mut().iter_mut().zip(p_t.probs.data()).zip(p_s.probs.data()) {
        if s >= eps {
            *g = -t / s * inv_n;
        }
    }
    grad.finite("kl_distill_loss_backward")
}

fn check_rho(rho: f64) -> Result<()> {
    if !(rho > 0.0) || !rho.is_finite() {
        return Err(config_err!("KD temperature must be positive, got {rho}"));
    }
    Ok(())
}

/// `ρ² · CE(σ(z_T/ρ), σ(z_S/ρ))`, averaged over rows.
pub fn kd_loss<T: Scalar>(z_t: &Tensor<T>, z_s: &Tensor<T>, rho: f64) -> Result<T> {
    check_rho(rho)?;
    z_t.ensure_same_shape(z_s, "kd_loss")?;
    let inv = T::from_f64_lossy(1.0 / rho);
    let target = ops::softmax(&z_t.map(|v| v * inv), 1)?;
    let ce = ops::cross_entropy_logits(&z_s.map(|v| v * inv), &target)?;
    finite_scalar(ce * T::from_f64_lossy(rho * rho), "kd_loss")
}

/// Gradient of [`kd_loss`] with respect to `z_S`: `ρ (σ(z_S/ρ) − σ(z_T/ρ)) / N`.
pub fn kd_loss_backward<T: Scalar>(z_t: &Tensor<T>, z_s: &Tensor<T>, rho: f64) -> Result<Tensor<T>> {
    check_rho(rho)?;
    z_t.ensure_same_shape(z_s, "kd_loss_backward")?;
    let inv = T::from_f64_lossy(1.0 / rho);
    let target = ops::softmax(&z_t.map(|v| v * inv), 1)?;
    let mut g = ops::cross_entropy_logits_backward(&z_s.map(|v| v * inv), &target)?;
    g.scale(T::from_f64_lossy(rho));
    g.finite("kd_loss_backward")
}

/// 1×1 convolution mapping student channels onto teacher channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Regressor<T: Scalar = f32> {
    /// C_T×C_S×1×1.
    pub weight: Tensor<T>,
    /// C_T.
    pub bias: Tensor<T>,
}

impl<T: Scalar> Regressor<T> {
    /// Uniform weights in ±sqrt(6 / C_S), zero bias.
    pub fn init(student_channels: usize, teacher_channels: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = (6.0 / student_channels as f64).sqrt();
        let weight = Tensor::<f64>::from_fn(&[teacher_channels, student_channels, 1, 1], |_| {
            rng.random_range(-bound..bound)
        })?;
        Ok(Self {
            weight: weight.cast(),
            bias: Tensor::zeros(&[teacher_channels])?,
        })
    }

    pub fn apply(&self, f_s: &Tensor<T>) -> Result<Tensor<T>> {
        let mut y = ops::conv2d(f_s, &self.weight, 1, 0)?;
        ops::add_channel_bias(&mut y, &self.bias)?;
        Ok(y)
    }
}

pub struct RegressionGrads<T: Scalar> {
    pub features: Tensor<T>,
    /// `(weight, bias)` when a regressor was used.
    pub regressor: Option<(Tensor<T>, Tensor<T>)>,
}

fn regressed<T: Scalar>(f_s: &Tensor<T>, f_t: &Tensor<T>, regressor: Option<&Regressor<T>>) -> Result<Tensor<T>> {
    let (ns, cs, hs, ws) = f_s.dims4()?;
    let (nt, ct, ht, wt) = f_t.dims4()?;
    if (ns, hs, ws) != (nt, ht, wt) {
        return Err(dim_err!(
            "feature regression needs matched maps, got {:?} and {:?}",
            f_s.shape(),
            f_t.shape()
        ));
    }
    match regressor {
        Some(r) => r.apply(f_s),
        None if cs == ct => Ok(f_s.clone()),
        None => Err(config_err!(
            "student has {cs} channels, teacher {ct}: a regressor is required"
        )),
    }
}

/// Mean squared error between the (regressed) student map and the teacher map.
pub fn feature_regression_loss<T: Scalar>(
    f_s: &Tensor<T>,
    f_t: &Tensor<T>,
    regressor: Option<&Regressor<T>>,
) -> Result<T> {
    let y = regressed(f_s, f_t, regressor)?;
    y.ensure_same_shape(f_t, "feature_regression_loss")?;
    let total = y
        .data()
        .iter()
        .zip(f_t.data())
        .fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b));
    finite_scalar(total / T::from_usize(y.len()).unwrap(), "feature_regression_loss")
}

pub fn feature_regression_loss_backward<T: Scalar>(
    f_s: &Tensor<T>,
    f_t: &Tensor<T>,
    regressor: Option<&Regressor<T>>,
) -> Result<RegressionGrads<T>> {
    let y = regressed(f_s, f_t, regressor)?;
    y.ensure_same_shape(f_t, "feature_regression_loss_backward")?;
    let scale = T::from_f64_lossy(2.0 / y.len() as f64);
    let mut g = y.zeros_like();
    for ((gv, &a), &b) in g.data_mut().iter_mut().zip(y.data()).zip(f_t.data()) {
        *gv = (a - b) * scale;
    }
    match regressor {
        Some(r) => {
            let (gx, gw) = ops::conv2d_backward(f_s, &r.weight, &g, 1, 0)?;
            let gb = ops::channel_bias_grad(&g)?;
            Ok(RegressionGrads {
                features: gx,
                regressor: Some((gw, gb)),
            })
        }
        None => Ok(RegressionGrads {
            features: g.finite("feature_regression_loss_backward")?,
            regressor: None,
        }),
    }
}
