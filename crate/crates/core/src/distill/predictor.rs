//! Cosine-similarity assignment predictor: at every location the student
//! feature is compared with K learned directions, scaled by γ and softmaxed.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, dim_err, Result};
use crate::tensor::{finite_scalar, Scalar, Tensor};
use crate::vocab::AssignmentMap;

/// Lower clamp on feature and column norms.
pub const NORM_CLAMP: f64 = 1e-8;

/// Initial value of the learnable scale.
pub const GAMMA_INIT: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorParams<T: Scalar = f32> {
    /// C_S×K; column `i` is word `i`.
    pub weight: Tensor<T>,
    pub gamma: T,
}

impl<T: Scalar> PredictorParams<T> {
    pub fn new(weight: Tensor<T>, gamma: T) -> Result<Self> {
        weight.dims2()?;
        if !(gamma >= T::zero()) || !gamma.is_finite() {
            return Err(config_err!("predictor scale must be finite and ≥ 0, got {gamma}"));
        }
        Ok(Self { weight, gamma })
    }

    /// Uniform weights in ±sqrt(6 / C_S) and γ = [`GAMMA_INIT`].
    pub fn init(channels: usize, k: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = (6.0 / channels.max(1) as f64).sqrt();
        let weight = Tensor::<f64>::from_fn(&[channels, k], |_| rng.random_range(-bound..bound))?;
        Self::new(weight.cast(), T::from_f64_lossy(GAMMA_INIT))
    }

    pub fn channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn k(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Everything the backward pass needs from one forward evaluation.
pub struct PredictorCache<T: Scalar> {
    /// Column-normalized weights, C_S×K.
    wn: Vec<T>,
    /// Clamped column norms.
    w_norm: Vec<T>,
    w_clamped: Vec<bool>,
    /// Normalized features, N×C_S×HW.
    fhat: Vec<T>,
    /// Clamped feature norms, N×HW.
    f_norm: Vec<T>,
    f_clamped: Vec<bool>,
    /// Cosines, N×K×HW.
    cos: Vec<T>,
    gamma: T,
    dims: (usize, usize, usize, usize, usize),
}

pub struct PredictorGrads<T: Scalar> {
    pub features: Tensor<T>,
    pub weight: Tensor<T>,
    pub gamma: T,
}

/// `p_i ∝ exp(γ · cos(W_i, f))` at every location of `features`.
pub fn predictor_forward<T: Scalar>(
    features: &Tensor<T>,
    params: &PredictorParams<T>,
) -> Result<(AssignmentMap<T>, PredictorCache<T>)> {
    let (n, c, h, w) = features.dims4()?;
    let (pc, k) = params.weight.dims2()?;
    if pc != c {
        return Err(dim_err!(
            "predictor expects {pc} channels, student map has {c}"
        ));
    }
    let eps = T::from_f64_lossy(NORM_CLAMP);
    let hw = h * w;
    let wdata = params.weight.data();
    let mut w_norm = vec![T::zero(); k];
    for row in wdata.chunks_exact(k) {
        for (acc, &v) in w_norm.iter_mut().zip(row) {
            *acc = *acc + v * v;
        }
    }
    let w_clamped: Vec<bool> = w_norm.iter().map(|&s| s.sqrt() < eps).collect();
    w_norm.iter_mut().for_each(|s| *s = s.sqrt().max(eps));
    let wn: Vec<T> = wdata
        .iter()
        .enumerate()
        .map(|(i, &v)| v / w_norm[i % k])
        .collect();

    let mut fhat = features.data().to_vec();
    let mut f_norm = vec![T::zero(); n * hw];
    let mut f_clamped = vec![false; n * hw];
    let mut cos = vec![T::zero(); n * k * hw];
    let mut probs = vec![T::zero(); n * k * hw];
    for s in 0..n {
        let f = &mut fhat[s * c * hw..(s + 1) * c * hw];
        let norms = &mut f_norm[s * hw..(s + 1) * hw];
        for ch in 0..c {
            for (acc, &v) in norms.iter_mut().zip(&f[ch * hw..(ch + 1) * hw]) {
                *acc = *acc + v * v;
            }
        }
        for (loc, v) in norms.iter_mut().enumerate() {
            f_clamped[s * hw + loc] = v.sqrt() < eps;
            *v = v.sqrt().max(eps);
        }
        for ch in 0..c {
            for (v, &nv) in f[ch * hw..(ch + 1) * hw].iter_mut().zip(norms.iter()) {
                *v = *v / nv;
            }
        }
        let cs = &mut cos[s * k * hw..(s + 1) * k * hw];
        T::gemm(true, false, k, hw, c, T::one(), &wn, f, T::zero(), cs);
        let ps = &mut probs[s * k * hw..(s + 1) * k * hw];
        for loc in 0..hw {
            let m = (0..k).fold(T::neg_infinity(), |m, j| m.max(params.gamma * cs[j * hw + loc]));
            let mut total = T::zero();
            for j in 0..k {
                let e = (params.gamma * cs[j * hw + loc] - m).exp();
                ps[j * hw + loc] = e;
                total = total + e;
            }
            for j in 0..k {
                ps[j * hw + loc] = ps[j * hw + loc] / total;
            }
        }
    }
    let map = AssignmentMap {
        probs: Tensor::new(vec![n, k, h, w], probs)?.finite("predictor_forward")?,
        temperature: f64::NAN,
    };
    let cache = PredictorCache {
        wn,
        w_norm,
        w_clamped,
        fhat,
        f_norm,
        f_clamped,
        cos,
        gamma: params.gamma,
        dims: (n, c, k, h, w),
    };
    Ok((map, cache))
}

/// Gradients with respect to the student features, W and γ given the loss
/// gradient at the predicted probabilities.
pub fn predictor_backward<T: Scalar>(
    probs: &AssignmentMap<T>,
    cache: &PredictorCache<T>,
    grad_probs: &Tensor<T>,
) -> Result<PredictorGrads<T>> {
    let (n, c, k, h, w) = cache.dims;
    if grad_probs.shape() != [n, k, h, w] || probs.probs.shape() != [n, k, h, w] {
        return Err(dim_err!(
            "predictor_backward: gradient {:?} does not match [{n}, {k}, {h}, {w}]",
            grad_probs.shape()
        ));
    }
    let hw = h * w;
    let p = probs.probs.data();
    let g = grad_probs.data();
    let mut grad_f = vec![T::zero(); n * c * hw];
    let mut grad_wn = vec![T::zero(); c * k];
    let mut grad_gamma = T::zero();
    // dL/dcos, one sample at a time.
    let mut u = vec![T::zero(); k * hw];
    let mut g_fhat = vec![T::zero(); c * hw];
    for s in 0..n {
        let ps = &p[s * k * hw..(s + 1) * k * hw];
        let gs = &g[s * k * hw..(s + 1) * k * hw];
        let cs = &cache.cos[s * k * hw..(s + 1) * k * hw];
        let mut r = vec![T::zero(); hw];
        for loc in 0..hw {
            let inner = (0..k).fold(T::zero(), |acc, j| acc + gs[j * hw + loc] * ps[j * hw + loc]);
            for j in 0..k {
                let i = j * hw + loc;
                let g_logit = ps[i] * (gs[i] - inner);
                grad_gamma = grad_gamma + g_logit * cs[i];
                u[i] = g_logit * cache.gamma;
                r[loc] = r[loc] + u[i] * cs[i];
            }
        }
        let fh = &cache.fhat[s * c * hw..(s + 1) * c * hw];
        // grad wrt normalized weights accumulates fhat · uᵀ.
        T::gemm(false, true, c, k, hw, T::one(), fh, &u, T::one(), &mut grad_wn);
        T::gemm(false, false, c, hw, k, T::one(), &cache.wn, &u, T::zero(), &mut g_fhat);
        let norms = &cache.f_norm[s * hw..(s + 1) * hw];
        let clamped = &cache.f_clamped[s * hw..(s + 1) * hw];
        let gf = &mut grad_f[s * c * hw..(s + 1) * c * hw];
        for ch in 0..c {
            for loc in 0..hw {
                let i = ch * hw + loc;
                let radial = if clamped[loc] { T::zero() } else { fh[i] * r[loc] };
                gf[i] = (g_fhat[i] - radial) / norms[loc];
            }
        }
    }
    let mut grad_w = vec![T::zero(); c * k];
    for j in 0..k {
        let along = if cache.w_clamped[j] {
            T::zero()
        } else {
            (0..c).fold(T::zero(), |acc, ch| acc + cache.wn[ch * k + j] * grad_wn[ch * k + j])
        };
        for ch in 0..c {
            let i = ch * k + j;
            grad_w[i] = (grad_wn[i] - cache.wn[i] * along) / cache.w_norm[j];
        }
    }
    let grad_gamma = finite_scalar(grad_gamma, "predictor_backward")?;
    Ok(PredictorGrads {
        features: Tensor::new(vec![n, c, h, w], grad_f)?.finite("predictor_backward")?,
        weight: Tensor::new(vec![c, k], grad_w)?.finite("predictor_backward")?,
        gamma: grad_gamma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(w: Vec<f64>, c: usize, k: usize, gamma: f64) -> PredictorParams<f64> {
        PredictorParams::new(Tensor::new(vec![c, k], w).unwrap(), gamma).unwrap()
    }

    #[test]
    fn orthogonal_columns_give_three_to_one() {
        let f = Tensor::new(vec![1, 2, 1, 1], vec![1.0, 0.0]).unwrap();
        let (p, _) = predictor_forward(&f, &params(vec![1.0, 0.0, 0.0, 1.0], 2, 2, 3f64.ln())).unwrap();
        assert!((p.probs.data()[0] - 0.75).abs() < 1e-12);
        assert!((p.probs.data()[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn zero_scale_is_uniform_even_for_zero_features() {
        let f = Tensor::<f64>::zeros(&[2, 3, 2, 2]).unwrap();
        let pp = PredictorParams::<f64>::init(3, 5, 1).unwrap();
        let (p, _) = predictor_forward(&f, &PredictorParams { gamma: 0.0, ..pp }).unwrap();
        assert!(p.probs.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn channel_mismatch_is_a_dimension_error() {
        let f = Tensor::<f64>::zeros(&[1, 4, 1, 1]).unwrap();
        let pp = PredictorParams::<f64>::init(3, 2, 0).unwrap();
        assert!(matches!(predictor_forward(&f, &pp), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn negative_scale_rejected_at_construction() {
        let w = Tensor::<f64>::zeros(&[2, 2]).unwrap();
        assert!(PredictorParams::new(w, -1.0).is_err());
    }
}
