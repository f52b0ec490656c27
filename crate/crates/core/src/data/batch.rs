use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::error::{config_err, Result};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Augment {
    None,
    /// Horizontal mirror with probability 0.5 per image.
    Flip,
}

impl Augment {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Augment::None),
            "flip" => Ok(Augment::Flip),
            other => Err(config_err!("unknown augmentation '{other}' (none|flip)")),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Augment::None => "none",
            Augment::Flip => "flip",
        }
    }
}

/// Mirrors every row of a C×H×W image.
pub fn flip_horizontal(image: &[f32], channels: usize, height: usize, width: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(channels * height * width);
    for row in image.chunks_exact(width) {
        out.extend(row.iter().rev());
    }
    out
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub flips: Vec<bool>,
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

/// One epoch over a dataset. Every sample appears exactly once; the final
/// batch may be short.
pub struct BatchIter<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    flips: Vec<bool>,
    batch_size: usize,
    pos: usize,
}

impl<'a> BatchIter<'a> {
    /// `shuffle_seed = None` visits samples in storage order. The epoch index
    /// is mixed into the seed so each epoch gets its own permutation.
    pub fn new(
        dataset: &'a Dataset,
        batch_size: usize,
        shuffle_seed: Option<u64>,
        augment: Augment,
        epoch: u64,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(config_err!("batch size must be at least 1"));
        }
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut flips = vec![false; dataset.len()];
        if let Some(s) = shuffle_seed {
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(s, epoch));
            order.shuffle(&mut rng);
            if augment == Augment::Flip {
                for f in flips.iter_mut() {
                    *f = rng.random_bool(0.5);
                }
            }
        }
        Ok(Self {
            dataset,
            order,
            flips,
            batch_size,
            pos: 0,
        })
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        let flips = self.flips[self.pos..end].to_vec();
        self.pos = end;
        let labels = indices.iter().map(|&i| self.dataset.labels()[i]).collect();
        Some(self.dataset.batch(&indices, &flips).map(|images| Batch {
            indices,
            flips,
            images,
            labels,
        }))
    }
}
