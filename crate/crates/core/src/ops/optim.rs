use crate::error::{config_err, Result};
use crate::tensor::{Scalar, Tensor};

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v ← momentum·v + grad + weight_decay·param; param ← param − lr·v`.
pub fn sgd_step<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    velocity: &mut Tensor<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if !(lr > 0.0) {
        return Err(config_err!("learning rate must be positive, got {lr}"));
    }
    param.ensure_same_shape(grad, "sgd_step")?;
    param.ensure_same_shape(velocity, "sgd_step")?;
    let (lr, mu, wd) = (
        T::from_f64_lossy(lr),
        T::from_f64_lossy(momentum),
        T::from_f64_lossy(weight_decay),
    );
    for ((p, &g), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(velocity.data_mut().iter_mut())
    {
        *v = mu * *v + g + wd * *p;
        *p = *p - lr * *v;
    }
    param.check_finite("sgd_step")
}
