//! Seeded synthetic image classes: horizontal and vertical gratings, target
//! rings, squares, blobs, rings, checkerboards and crosses rendered at random
//! position, scale and colour, with a weaker distractor pattern and additive
//! noise. Every class is closed under horizontal mirroring.

use std::f32::consts::PI;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, Split};
use crate::error::{config_err, Result};
use crate::seed;

const KINDS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub num_classes: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub size: usize,
    /// Standard deviation of the additive pixel noise.
    pub noise: f32,
    /// Contrast of the distractor pattern relative to the main one; 0 disables it.
    pub distractor: f32,
}

impl SynthConfig {
    pub fn new(seed: u64, num_classes: usize, n_train: usize, n_test: usize, size: usize) -> Self {
        Self {
            seed,
            num_classes,
            n_train,
            n_test,
            size,
            noise: 0.1,
            distractor: 0.25,
        }
    }
}

struct Pattern {
    kind: usize,
    freq: f32,
    cx: f32,
    cy: f32,
    radius: f32,
    angle: f32,
}

fn disk(rho: f32) -> f32 {
    1.0 / (1.0 + ((rho - 1.0) / 0.08).exp())
}

impl Pattern {
    fn random(kind: usize, variant: usize, size: f32, rng: &mut ChaCha8Rng) -> Self {
        Self {
            kind,
            freq: 1.6 + 0.5 * variant as f32 + rng.random_range(0.0..0.5),
            cx: rng.random_range(0.25..0.75) * size,
            cy: rng.random_range(0.25..0.75) * size,
            radius: rng.random_range(0.2..0.34) * size,
            angle: rng.random_range(-0.3..0.3),
        }
    }

    /// Pattern intensity in [0, 1] at pixel (x, y).
    fn mask(&self, x: f32, y: f32) -> f32 {
        let (dx, dy) = ((x - self.cx) / self.radius, (y - self.cy) / self.radius);
        let (s, c) = self.angle.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        let rho = (u * u + v * v).sqrt();
        let wave = |t: f32| 0.5 + 0.5 * (2.0 * PI * self.freq * t).cos();
        match self.kind {
            0 => disk(rho) * wave(v),
            1 => disk(rho) * wave(u),
            2 => disk(rho) * wave(0.5 * rho),
            3 => 1.0 / (1.0 + ((u.abs().max(v.abs()) - 0.8) / 0.06).exp()),
            4 => (-rho * rho / 0.45).exp(),
            5 => (-(rho - 0.75).powi(2) / (2.0 * 0.11 * 0.11)).exp(),
            6 => disk(rho) * (0.5 + 0.5 * (2.0 * PI * self.freq * u).cos() * (2.0 * PI * self.freq * v).cos()),
            _ => {
                let bar = |t: f32| (-t * t / (2.0 * 0.13 * 0.13)).exp();
                disk(rho) * bar(u).max(bar(v))
            }
        }
    }
}

fn render(label: usize, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let size = cfg.size as f32;
    let main = Pattern::random(label % KINDS, label / KINDS, size, rng);
    let distractor = (cfg.distractor > 0.0).then(|| {
        let kind = (label % KINDS + rng.random_range(1..KINDS)) % KINDS;
        Pattern::random(kind, rng.random_range(0..2), size, rng)
    });
    let bg: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.6));
    let fg: [f32; 3] = std::array::from_fn(|c| {
        let delta = rng.random_range(0.25..0.45);
        if rng.random_bool(0.5) || bg[c] + delta > 1.0 {
            (bg[c] - delta).max(0.0)
        } else {
            bg[c] + delta
        }
    });
    let noise = Normal::new(0.0f32, cfg.noise.max(0.0)).expect("non-negative noise std");
    let plane = cfg.size * cfg.size;
    let mut img = vec![0.0f32; 3 * plane];
    for y in 0..cfg.size {
        for x in 0..cfg.size {
            let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
            let m = main.mask(px, py);
            let d = distractor.as_ref().map_or(0.0, |p| cfg.distractor * p.mask(px, py));
            let w = m.max(d);
            for c in 0..3 {
                img[c * plane + y * cfg.size + x] = bg[c] + (fg[c] - bg[c]) * w;
            }
        }
    }
    for v in &mut img {
        *v = (*v + noise.sample(rng)).clamp(0.0, 1.0);
    }
    img
}

fn generate_split(cfg: &SynthConfig, split: Split, n: usize) -> Result<Dataset> {
    let stream = seed::derive(cfg.seed, split as u64 + 1);
    let mut images = Vec::with_capacity(n * 3 * cfg.size * cfg.size);
    let labels: Vec<usize> = (0..n).map(|i| i % cfg.num_classes).collect();
    for (i, &label) in labels.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(stream, i as u64));
        images.extend(render(label, cfg, &mut rng));
    }
    let mut d = Dataset::new(images, labels, cfg.num_classes, (3, cfg.size, cfg.size), split)?;
    d.seed = Some(cfg.seed);
    Ok(d)
}

/// Generates `(train, test)`. Class `c` draws pattern kind `c mod 8` at
/// frequency band `c / 8`; per-class counts differ by at most one.
pub fn synth_generate(cfg: &SynthConfig) -> Result<(Dataset, Dataset)> {
    if cfg.num_classes < 2 {
        return Err(config_err!("synthetic data needs at least 2 classes"));
    }
    if cfg.size < 4 {
        return Err(config_err!("synthetic images must be at least 4x4"));
    }
    Ok((
        generate_split(cfg, Split::Train, cfg.n_train)?,
        generate_split(cfg, Split::Test, cfg.n_test)?,
    ))
}
