use super::Vocabulary;
use crate::error::{config_err, dim_err, Result};
use crate::tensor::{Scalar, Tensor};

/// Per-location distributions over K words, laid out N×K×H×W.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentMap<T: Scalar = f32> {
    pub probs: Tensor<T>,
    /// Temperature used to produce the map; 0 marks hard assignment.
    pub temperature: f64,
}

impl<T: Scalar> AssignmentMap<T> {
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.probs.dims4().expect("assignment maps are 4-D")
    }

    pub fn k(&self) -> usize {
        self.dims().1
    }

    /// Distribution at sample `n`, location `(y, x)`.
    pub fn at(&self, n: usize, y: usize, x: usize) -> Vec<T> {
        let (_, k, h, w) = self.dims();
        let base = n * k * h * w + y * w + x;
        (0..k).map(|j| self.probs.data()[base + j * h * w]).collect()
    }

    /// Largest |Σ_k p − 1| over all locations.
    pub fn max_normalization_error(&self) -> f64 {
        let (n, k, h, w) = self.dims();
        let hw = h * w;
        let p = self.probs.data();
        let mut worst = 0.0f64;
        for s in 0..n {
            for loc in 0..hw {
                let sum: f64 = (0..k).map(|j| p[s * k * hw + j * hw + loc].as_f64()).sum();
                worst = worst.max((sum - 1.0).abs());
            }
        }
        worst
    }

    /// Mean over locations of the largest word probability.
    pub fn mean_max_prob(&self) -> f64 {
        let (n, k, h, w) = self.dims();
        let hw = h * w;
        let p = self.probs.data();
        let mut total = 0.0;
        for s in 0..n {
            for loc in 0..hw {
                total += (0..k)
                    .map(|j| p[s * k * hw + j * hw + loc].as_f64())
                    .fold(0.0, f64::max);
            }
        }
        total / (n * hw) as f64
    }
}

/// `d_k = ‖v_k − f‖²` for every word.
pub fn distances<T: Scalar>(f: &[T], vocab: &Vocabulary) -> Result<Vec<T>> {
    if f.len() != vocab.dim() {
        return Err(dim_err!(
            "feature of dimension {} against vocabulary of dimension {}",
            f.len(),
            vocab.dim()
        ));
    }
    Ok((0..vocab.k())
        .map(|k| {
            vocab
                .centroid(k)
                .iter()
                .zip(f)
                .fold(T::zero(), |acc, (&v, &x)| {
                    let d = T::from_f64_lossy(v as f64) - x;
                    acc + d * d
                })
        })
        .collect())
}

/// One-hot at the smallest distance; ties go to the lowest index.
pub fn hard_assign<T: Scalar>(d: &[T]) -> Vec<T> {
    let best = d
        .iter()
        .enumerate()
        .fold((0, T::infinity()), |(bi, bv), (i, &v)| if v < bv { (i, v) } else { (bi, bv) })
        .0;
    (0..d.len()).map(|i| if i == best { T::one() } else { T::zero() }).collect()
}

/// `softmax(−d / τ)`. τ = 0 selects [`hard_assign`]; τ < 0 is an error.
pub fn soft_assign<T: Scalar>(d: &[T], tau: f64) -> Result<Vec<T>> {
    if tau < 0.0 || tau.is_nan() {
        return Err(config_err!("assignment temperature must be ≥ 0, got {tau}"));
    }
    if tau == 0.0 {
        return Ok(hard_assign(d));
    }
    let inv = T::from_f64_lossy(1.0 / tau);
    let min = d.iter().fold(T::infinity(), |m, &v| m.min(v));
    let mut p: Vec<T> = d.iter().map(|&v| (-(v - min) * inv).exp()).collect();
    let total = p.iter().fold(T::zero(), |a, &v| a + v);
    p.iter_mut().for_each(|v| *v = *v / total);
    Ok(p)
}

/// Quantizes every location of an N×C_T×H×W teacher map.
pub fn quantize_feature_map<T: Scalar>(features: &Tensor<T>, vocab: &Vocabulary, tau: f64) -> Result<AssignmentMap<T>> {
    if tau < 0.0 || tau.is_nan() {
        return Err(config_err!("assignment temperature must be ≥ 0, got {tau}"));
    }
    let (n, c, h, w) = features.dims4()?;
    if c != vocab.dim() {
        return Err(dim_err!(
            "teacher map has {c} channels, vocabulary expects {}",
            vocab.dim()
        ));
    }
    let k = vocab.k();
    let hw = h * w;
    let centroids: Vec<T> = vocab.centroids().iter().map(|&v| T::from_f64_lossy(v as f64)).collect();
    let mut probs = vec![T::zero(); n * k * hw];
    let mut d = vec![T::zero(); k * hw];
    let inv_tau = (tau > 0.0).then(|| T::from_f64_lossy(1.0 / tau));
    for s in 0..n {
        let f = features.sample(s);
        d.iter_mut().for_each(|v| *v = T::zero());
        for j in 0..k {
            let row = &mut d[j * hw..(j + 1) * hw];
            for ch in 0..c {
                let v = centroids[j * c + ch];
                for (acc, &x) in row.iter_mut().zip(&f[ch * hw..(ch + 1) * hw]) {
                    let diff = v - x;
                    *acc = *acc + diff * diff;
                }
            }
        }
        let out = &mut probs[s * k * hw..(s + 1) * k * hw];
        for loc in 0..hw {
            let (best, min) = (0..k).fold((0, T::infinity()), |(bi, bv), j| {
                let v = d[j * hw + loc];
                if v < bv {
                    (j, v)
                } else {
                    (bi, bv)
                }
            });
            match inv_tau {
                None => out[best * hw + loc] = T::one(),
                Some(inv) => {
                    let mut total = T::zero();
                    for j in 0..k {
                        let e = (-(d[j * hw + loc] - min) * inv).exp();
                        out[j * hw + loc] = e;
                        total = total + e;
                    }
                    for j in 0..k {
                        out[j * hw + loc] = out[j * hw + loc] / total;
                    }
                }
            }
        }
    }
    Ok(AssignmentMap {
        probs: Tensor::new(vec![n, k, h, w], probs)?.finite("quantize_feature_map")?,
        temperature: tau,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_words() -> Vocabulary {
        Vocabulary::new(vec![0.0, 0.0, 3.0, 4.0], 2, 2, "t", 0.0).unwrap()
    }

    #[test]
    fn distances_by_hand() {
        assert_eq!(distances(&[0.0f64, 0.0], &two_words()).unwrap(), vec![0.0, 25.0]);
        assert_eq!(distances(&[3.0f64, 4.0], &two_words()).unwrap()[1], 0.0);
        assert!(distances(&[0.0f64], &two_words()).is_err());
    }

    #[test]
    fn soft_assignment_values() {
        let p = soft_assign(&[0.0f64, 3f64.ln()], 1.0).unwrap();
        assert!((p[0] - 0.75).abs() < 1e-12 && (p[1] - 0.25).abs() < 1e-12);
        assert_eq!(soft_assign(&[2.0f64; 4], 0.3).unwrap(), vec![0.25; 4]);
        let sharp = soft_assign(&[0.0f64, 1.0, 2.0], 0.01).unwrap();
        assert!(sharp[1] + sharp[2] < 1e-40 && sharp[0] >= 1.0 - 1e-40);
        assert!(soft_assign(&[0.0f64], -1.0).is_err());
        assert_eq!(soft_assign(&[1.0f64, 0.5], 0.0).unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn hard_assignment_ties_go_low() {
        assert_eq!(hard_assign(&[1.0f64, 2.0, 3.0]), vec![1.0, 0.0, 0.0]);
        assert_eq!(hard_assign(&[5.0f64, 5.0]), vec![1.0, 0.0]);
    }

    #[test]
    fn on_centroid_map_concentrates_on_that_word() {
        let vocab = Vocabulary::new(
            vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0],
            4,
            2,
            "t",
            0.0,
        )
        .unwrap();
        let f = Tensor::<f64>::from_fn(&[1, 2, 3, 3], |_| 1.0).unwrap();
        let map = quantize_feature_map(&f, &vocab, 0.01).unwrap();
        assert_eq!(map.probs.shape(), &[1, 4, 3, 3]);
        for y in 0..3 {
            for x in 0..3 {
                assert!(map.at(0, y, x)[3] >= 1.0 - 1e-40);
            }
        }
        assert!(map.max_normalization_error() < 1e-12);
        let wrong = Tensor::<f64>::zeros(&[1, 3, 2, 2]).unwrap();
        assert!(quantize_feature_map(&wrong, &vocab, 0.1).is_err());
    }
}
