//! CIFAR-10 binary records: one label byte followed by 3072 pixel bytes
//! (R, G, B planes, each 32×32 row-major).

use std::path::Path;

use super::{Dataset, Split};
use crate::error::{format_err, Result};

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR_RECORD_BYTES: usize = 1 + CIFAR_PIXELS;
const MAX_LABEL: u8 = 9;

/// Per-channel `(x − mean) / std`, applied after scaling pixels to [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Normalization {
    /// Leaves [0, 1] pixels untouched.
    pub const IDENTITY: Normalization = Normalization {
        mean: [0.0; 3],
        std: [1.0; 3],
    };

    /// Approximate centring for the synthetic generator's pixel range.
    pub const SYNTHETIC: Normalization = Normalization {
        mean: [0.35; 3],
        std: [0.25; 3],
    };

    /// Channel statistics of the CIFAR-10 training set.
    pub const CIFAR10: Normalization = Normalization {
        mean: [0.4914, 0.4822, 0.4465],
        std: [0.2470, 0.2435, 0.2616],
    };

    pub fn apply(&self, image: &mut [f32]) {
        let plane = image.len() / 3;
        for (c, chunk) in image.chunks_exact_mut(plane).enumerate() {
            for v in chunk {
                *v = (*v - self.mean[c]) / self.std[c];
            }
        }
    }
}

/// Decodes records from memory. An empty buffer is a valid, empty dataset.
pub fn parse_cifar_binary(bytes: &[u8], norm: &Normalization, split: Split) -> Result<Dataset> {
    if bytes.len() % CIFAR_RECORD_BYTES != 0 {
        return Err(format_err!(
            "{} bytes is not a whole number of {CIFAR_RECORD_BYTES}-byte records",
            bytes.len()
        ));
    }
    if norm.std.iter().any(|&s| !(s > 0.0) || !s.is_finite()) || norm.mean.iter().any(|m| !m.is_finite()) {
        return Err(format_err!("normalization needs finite means and positive stds"));
    }
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let mut images = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        if rec[0] > MAX_LABEL {
            return Err(format_err!("record {i} has label {} > {MAX_LABEL}", rec[0]));
        }
        labels.push(rec[0] as usize);
        let start = images.len();
        images.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
        norm.apply(&mut images[start..]);
    }
    Dataset::new(
        images,
        labels,
        MAX_LABEL as usize + 1,
        (3, CIFAR_SIDE, CIFAR_SIDE),
        split,
    )
}

pub fn load_cifar_binary(path: &Path, norm: &Normalization, split: Split) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    parse_cifar_binary(&bytes, norm, split)
}

/// Writes a 3×32×32 dataset with at most 10 classes as records, quantizing
/// [0, 1] pixel values to bytes.
pub fn encode_cifar_binary(dataset: &Dataset) -> Result<Vec<u8>> {
    if (dataset.channels, dataset.height, dataset.width) != (3, CIFAR_SIDE, CIFAR_SIDE) {
        return Err(format_err!(
            "record format needs 3x32x32 images, got {}x{}x{}",
            dataset.channels,
            dataset.height,
            dataset.width
        ));
    }
    if dataset.num_classes > MAX_LABEL as usize + 1 {
        return Err(format_err!("record format holds at most 10 classes"));
    }
    let mut out = Vec::with_capacity(dataset.len() * CIFAR_RECORD_BYTES);
    for i in 0..dataset.len() {
        out.push(dataset.labels()[i] as u8);
        out.extend(
            dataset
                .image(i)
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
    }
    Ok(out)
}
