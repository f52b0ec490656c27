//! Visual-word vocabularies learned from teacher features, and the
//! quantization of teacher feature maps into per-location word assignments.

mod file;
mod kmeans;
mod quantize;

pub use file::{decode_vocabulary, encode_vocabulary, QVWV_MAGIC, QVWV_VERSION};
pub use kmeans::{kmeans, KMeansConfig, KMeansFit};
pub use quantize::{distances, hard_assign, quantize_feature_map, soft_assign, AssignmentMap};

use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{dim_err, Error, Result};
use crate::models::Model;
use crate::tensor::{Scalar, Tensor};

/// K centroids in the teacher's C_T-dimensional feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    /// K×C_T, row-major.
    centroids: Vec<f32>,
    k: usize,
    dim: usize,
    pub tap: String,
    pub kmeans_objective: f64,
    /// Seed the vocabulary was fitted with; not part of the file format.
    pub seed: Option<u64>,
}

impl Vocabulary {
    pub fn new(centroids: Vec<f32>, k: usize, dim: usize, tap: impl Into<String>, kmeans_objective: f64) -> Result<Self> {
        if k == 0 || dim == 0 {
            return Err(Error::Vocabulary("vocabulary needs K ≥ 1 and C_T ≥ 1".into()));
        }
        if centroids.len() != k.checked_mul(dim).ok_or_else(|| dim_err!("K×C_T overflows"))? {
            return Err(dim_err!("{} centroid values for K={k}, C_T={dim}", centroids.len()));
        }
        if centroids.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("vocabulary centroids".into()));
        }
        Ok(Self {
            centroids,
            k,
            dim,
            tap: tap.into(),
            kmeans_objective,
            seed: None,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn centroids(&self) -> &[f32] {
        &self.centroids
    }

    pub fn centroid(&self, k: usize) -> &[f32] {
        &self.centroids[k * self.dim..(k + 1) * self.dim]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, encode_vocabulary(self))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        decode_vocabulary(&std::fs::read(path)?)
    }
}

/// Fits a vocabulary to the rows of `points` (M×C).
pub fn kmeans_fit<T: Scalar>(points: &Tensor<T>, k: usize, max_iters: usize, seed: u64) -> Result<Vocabulary> {
    let (_, dim) = points.dims2()?;
    let config = KMeansConfig {
        max_iters,
        ..KMeansConfig::new(k, seed)
    };
    vocabulary_from_fit(&kmeans(points.data(), dim, &config)?, k, dim, seed)
}

pub(crate) fn vocabulary_from_fit(fit: &KMeansFit, k: usize, dim: usize, seed: u64) -> Result<Vocabulary> {
    let centroids = fit.centroids.iter().map(|&v| v as f32).collect();
    let mut v = Vocabulary::new(centroids, k, dim, "", fit.objective)?;
    v.seed = Some(seed);
    Ok(v)
}

/// Samples up to `max_vectors` teacher feature vectors (one per spatial
/// location) uniformly without replacement across the dataset.
pub fn collect_features(
    teacher: &Model<f32>,
    dataset: &Dataset,
    tap: &str,
    k: usize,
    max_vectors: usize,
    seed: u64,
) -> Result<Tensor<f32>> {
    if max_vectors < k {
        return Err(Error::Vocabulary(format!(
            "max_vectors={max_vectors} is smaller than K={k}"
        )));
    }
    let point = teacher.arch.resolve_tap(tap)?;
    let (h, w) = teacher.arch.tap_extent(tap, dataset.height, dataset.width)?;
    let per_image = h * w;
    let available = dataset.len() * per_image;
    if available < k {
        return Err(Error::Vocabulary(format!(
            "only {available} feature vectors available for K={k}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks: Vec<usize> = if max_vectors >= available {
        (0..available).collect()
    } else {
        index::sample(&mut rng, available, max_vectors).into_vec()
    };
    picks.sort_unstable();

    let c = point.channels;
    let mut out = Vec::with_capacity(picks.len() * c);
    const CHUNK: usize = 64;
    let mut images: Vec<usize> = picks.iter().map(|p| p / per_image).collect();
    images.dedup();
    let mut cursor = 0;
    for chunk in images.chunks(CHUNK) {
        let batch = dataset.batch(chunk, &[])?;
        let feats = teacher.infer(&batch, &[tap])?;
        let f = feats.feature(tap)?;
        for (bi, &img) in chunk.iter().enumerate() {
            let sample = f.sample(bi);
            while cursor < picks.len() && picks[cursor] / per_image == img {
                let loc = picks[cursor] % per_image;
                out.extend((0..c).map(|ch| sample[ch * per_image + loc]));
                cursor += 1;
            }
        }
    }
    let m = picks.len();
    let features = Tensor::new(vec![m, c], out)?;
    if count_distinct_rows(&features) < k {
        return Err(Error::Vocabulary(format!(
            "fewer than K={k} distinct feature vectors among {m} collected"
        )));
    }
    Ok(features)
}

fn count_distinct_rows(points: &Tensor<f32>) -> usize {
    let dim = points.shape()[1];
    let mut rows: Vec<Vec<u32>> = points
        .data()
        .chunks_exact(dim)
        .map(|r| r.iter().map(|v| v.to_bits()).collect())
        .collect();
    rows.sort_unstable();
    rows.dedup();
    rows.len()
}
