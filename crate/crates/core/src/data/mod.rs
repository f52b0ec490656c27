//! Datasets: a seeded synthetic pattern generator, CIFAR-style binary
//! records, and a seeded mini-batch iterator.

mod batch;
mod cifar;
mod synth;

pub use batch::{flip_horizontal, Augment, Batch, BatchIter};
pub use cifar::{encode_cifar_binary, load_cifar_binary, parse_cifar_binary, Normalization, CIFAR_RECORD_BYTES};
pub use synth::{synth_generate, SynthConfig};

use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Images stored N×C×H×W in one flat buffer, with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Vec<f32>,
    labels: Vec<usize>,
    pub num_classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub split: Split,
    pub seed: Option<u64>,
}

impl Dataset {
    pub fn new(
        images: Vec<f32>,
        labels: Vec<usize>,
        num_classes: usize,
        (channels, height, width): (usize, usize, usize),
        split: Split,
    ) -> Result<Self> {
        let per = channels * height * width;
        if per == 0 || images.len() != labels.len() * per {
            return Err(dim_err!(
                "{} image values do not match {} labels of {channels}x{height}x{width}",
                images.len(),
                labels.len()
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(dim_err!("label {bad} out of range for {num_classes} classes"));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            channels,
            height,
            width,
            split,
            seed: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let per = self.image_len();
        &self.images[i * per..(i + 1) * per]
    }

    pub fn images(&self) -> &[f32] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Stacks the selected images (optionally mirrored) into an N×C×H×W tensor.
    pub fn batch(&self, indices: &[usize], flips: &[bool]) -> Result<Tensor<f32>> {
        if indices.is_empty() {
            return Err(dim_err!("empty batch"));
        }
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for (j, &i) in indices.iter().enumerate() {
            if i >= self.len() {
                return Err(dim_err!("sample {i} out of range {}", self.len()));
            }
            if flips.get(j).copied().unwrap_or(false) {
                data.extend(flip_horizontal(self.image(i), self.channels, self.height, self.width));
            } else {
                data.extend_from_slice(self.image(i));
            }
        }
        Tensor::new(vec![indices.len(), self.channels, self.height, self.width], data)
    }

    /// Applies `norm` to every image in place.
    pub fn normalize(&mut self, norm: &Normalization) {
        let len = self.image_len();
        if len == 0 {
            return;
        }
        for img in self.images.chunks_exact_mut(len) {
            norm.apply(img);
        }
    }

    /// The first `n` samples.
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            images: self.images[..n * self.image_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> Self {
        Self {
            images: Vec::new(),
            labels: Vec::new(),
            num_classes: self.num_classes,
            channels: self.channels,
            height: self.height,
            width: self.width,
            split: self.split,
            seed: self.seed,
        }
    }
}
