use crate::error::{dim_err, Result};
use crate::tensor::{Scalar, Tensor};

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes `grad_out` where the forward input (or output) was positive.
pub fn relu_backward<T: Scalar>(activation: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    activation.ensure_same_shape(grad_out, "relu_backward")?;
    let mut g = grad_out.clone();
    for (d, &a) in g.data_mut().iter_mut().zip(activation.data()) {
        if a <= T::zero() {
            *d = T::zero();
        }
    }
    Ok(g)
}

/// Fully connected layer: `x (N×D) · wᵀ (D×O) + b`.
pub fn linear<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d) = x.dims2()?;
    let (o, wd) = weight.dims2()?;
    if wd != d || bias.shape() != [o] {
        return Err(dim_err!(
            "linear: input {:?}, weight {:?}, bias {:?}",
            x.shape(),
            weight.shape(),
            bias.shape()
        ));
    }
    let mut out = Vec::with_capacity(n * o);
    for _ in 0..n {
        out.extend_from_slice(bias.data());
    }
    T::gemm(false, true, n, o, d, T::one(), x.data(), weight.data(), T::one(), &mut out);
    Tensor::new(vec![n, o], out)?.finite("linear")
}

pub struct LinearGrads<T: Scalar> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<LinearGrads<T>> {
    let (n, d) = x.dims2()?;
    let (o, _) = weight.dims2()?;
    if grad_out.shape() != [n, o] {
        return Err(dim_err!("linear_backward: grad {:?} != [{n}, {o}]", grad_out.shape()));
    }
    let mut gx = x.zeros_like();
    T::gemm(false, false, n, d, o, T::one(), grad_out.data(), weight.data(), T::zero(), gx.data_mut());
    let mut gw = weight.zeros_like();
    T::gemm(true, false, o, d, n, T::one(), grad_out.data(), x.data(), T::zero(), gw.data_mut());
    let mut gb = vec![T::zero(); o];
    for row in grad_out.data().chunks_exact(o) {
        for (acc, &g) in gb.iter_mut().zip(row) {
            *acc = *acc + g;
        }
    }
    Ok(LinearGrads {
        input: gx.finite("linear_backward")?,
        weight: gw.finite("linear_backward")?,
        bias: Tensor::new(vec![o], gb)?,
    })
}
