//! Plain CNN classifiers: stages of 3×3 conv + ReLU blocks separated by 2×
//! average down-sampling, then global average pooling and a linear head.
//!
//! Every block output is a named feature tap (`stage{s}.block{b}`, 1-based).
//! `stage{s}` aliases the last block of stage `s`, and `last_conv` the last
//! block of the final stage. Taps are post-ReLU.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{config_err, dim_err, Error, Result};
use crate::ops::{self, conv2d, conv2d_backward};
use crate::params::{ParamSet, Sgd};
use crate::tensor::{Scalar, Tensor};

pub const KERNEL: usize = 3;
pub const PADDING: usize = 1;
pub const LAST_CONV: &str = "last_conv";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stage {
    pub channels: usize,
    pub blocks: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchSpec {
    pub in_channels: usize,
    pub stages: Vec<Stage>,
    pub num_classes: usize,
}

/// Position of a tap in the flat conv-layer sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TapPoint {
    pub layer: usize,
    pub channels: usize,
    /// Number of 2× down-samplings applied before this layer.
    pub downsamples: usize,
}

struct ConvLayer {
    name: String,
    in_channels: usize,
    out_channels: usize,
    /// Input is average-pooled by 2× before the convolution.
    pooled: bool,
}

impl ArchSpec {
    pub fn new(in_channels: usize, stages: Vec<Stage>, num_classes: usize) -> Result<Self> {
        let spec = Self {
            in_channels,
            stages,
            num_classes,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Parses a stage list such as `32x2,64x2,128x2`.
    pub fn parse_stages(s: &str) -> Result<Vec<Stage>> {
        s.split(',')
            .map(|part| {
                let part = part.trim();
                let (c, b) = part
                    .split_once('x')
                    .ok_or_else(|| config_err!("stage '{part}' is not <channels>x<blocks>"))?;
                let channels = c
                    .trim()
                    .parse()
                    .map_err(|_| config_err!("bad channel count in stage '{part}'"))?;
                let blocks = b
                    .trim()
                    .parse()
                    .map_err(|_| config_err!("bad block count in stage '{part}'"))?;
                Ok(Stage { channels, blocks })
            })
            .collect()
    }

    pub fn stages_string(&self) -> String {
        self.stages
            .iter()
            .map(|s| format!("{}x{}", s.channels, s.blocks))
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(config_err!("architecture needs at least one stage"));
        }
        if self.in_channels == 0 || self.num_classes == 0 {
            return Err(config_err!("input channels and class count must be positive"));
        }
        if let Some(s) = self.stages.iter().find(|s| s.channels == 0 || s.blocks == 0) {
            return Err(config_err!(
                "stage {}x{} needs positive channels and blocks",
                s.channels,
                s.blocks
            ));
        }
        Ok(())
    }

    fn layers(&self) -> Vec<ConvLayer> {
        let mut out = Vec::new();
        let mut c_in = self.in_channels;
        for (si, st) in self.stages.iter().enumerate() {
            for b in 0..st.blocks {
                out.push(ConvLayer {
                    name: format!("stage{}.block{}", si + 1, b + 1),
                    in_channels: c_in,
                    out_channels: st.channels,
                    pooled: si > 0 && b == 0,
                });
                c_in = st.channels;
            }
        }
        out
    }

    pub fn final_channels(&self) -> usize {
        self.stages.last().map_or(0, |s| s.channels)
    }

    /// All tap names this architecture exposes.
    pub fn tap_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.layers().into_iter().map(|l| l.name).collect();
        names.extend((1..=self.stages.len()).map(|s| format!("stage{s}")));
        names.push(LAST_CONV.to_string());
        names
    }

    pub fn resolve_tap(&self, name: &str) -> Result<TapPoint> {
        let layers = self.layers();
        let target = if name == LAST_CONV {
            Some(layers.len() - 1)
        } else if let Some(s) = name
            .strip_prefix("stage")
            .and_then(|rest| rest.parse::<usize>().ok())
        {
            (1..=self.stages.len()).contains(&s).then(|| {
                self.stages[..s].iter().map(|st| st.blocks).sum::<usize>() - 1
            })
        } else {
            layers.iter().position(|l| l.name == name)
        };
        let layer = target.ok_or_else(|| config_err!("unknown feature tap '{name}'"))?;
        let downsamples = layers[..=layer].iter().filter(|l| l.pooled).count();
        Ok(TapPoint {
            layer,
            channels: layers[layer].out_channels,
            downsamples,
        })
    }

    /// Spatial extent of a tap for an input of `h`×`w`.
    pub fn tap_extent(&self, tap: &str, h: usize, w: usize) -> Result<(usize, usize)> {
        let point = self.resolve_tap(tap)?;
        let f = 1usize << point.downsamples;
        if h % f != 0 || w % f != 0 {
            return Err(config_err!(
                "input {h}x{w} is not divisible through {} down-samplings",
                point.downsamples
            ));
        }
        Ok((h / f, w / f))
    }
}

impl fmt::Display for ArchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} -> [{}] -> {}",
            self.in_channels,
            self.stages_string(),
            self.num_classes
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Scalar = f32> {
    pub arch: ArchSpec,
    pub params: ParamSet<T>,
    pub mode: Mode,
}

/// Activations retained for the backward pass.
pub struct ForwardCache<T: Scalar> {
    input: Tensor<T>,
    /// Post-ReLU output of every conv layer.
    acts: Vec<Tensor<T>>,
    /// Down-sampled conv input for layers that pool first.
    pooled: Vec<Option<Tensor<T>>>,
    gap: Tensor<T>,
}

pub struct ForwardOutput<T: Scalar> {
    pub logits: Tensor<T>,
    pub features: Vec<(String, Tensor<T>)>,
    cache: Option<ForwardCache<T>>,
}

impl<T: Scalar> ForwardOutput<T> {
    pub fn feature(&self, tap: &str) -> Result<&Tensor<T>> {
        self.features
            .iter()
            .find(|(n, _)| n == tap)
            .map(|(_, t)| t)
            .ok_or_else(|| config_err!("feature tap '{tap}' was not requested"))
    }
}

fn he_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Result<Tensor<f64>> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
        .map_err(|e| config_err!("initializer: {e}"))?;
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

/// He-normal weights, zero biases; a pure function of `(arch, seed)`.
pub fn build_model<T: Scalar>(arch: &ArchSpec, seed: u64) -> Result<Model<T>> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    for l in arch.layers() {
        let fan_in = l.in_channels * KERNEL * KERNEL;
        let w = he_normal(&mut rng, &[l.out_channels, l.in_channels, KERNEL, KERNEL], fan_in)?;
        params.insert(format!("{}.weight", l.name), w.cast())?;
        params.insert(format!("{}.bias", l.name), Tensor::zeros(&[l.out_channels])?)?;
    }
    let d = arch.final_channels();
    params.insert("fc.weight", he_normal(&mut rng, &[arch.num_classes, d], d)?.cast())?;
    params.insert("fc.bias", Tensor::zeros(&[arch.num_classes])?)?;
    Ok(Model {
        arch: arch.clone(),
        params,
        mode: Mode::Train,
    })
}

impl<T: Scalar> Model<T> {
    /// Rebuilds a model from stored parameters, checking them against `arch`.
    pub fn from_params(arch: ArchSpec, params: ParamSet<T>, mode: Mode) -> Result<Self> {
        let reference = build_model::<T>(&arch, 0)?;
        if reference.params.len() != params.len() {
            return Err(config_err!(
                "expected {} parameters for {arch}, found {}",
                reference.params.len(),
                params.len()
            ));
        }
        for (name, t) in reference.params.iter() {
            let got = params.expect(name)?;
            if got.shape() != t.shape() {
                return Err(config_err!(
                    "parameter {name} has shape {:?}, {arch} needs {:?}",
                    got.shape(),
                    t.shape()
                ));
            }
        }
        Ok(Self { arch, params, mode })
    }

    pub fn freeze(&mut self) {
        self.mode = Mode::Eval;
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            arch: self.arch.clone(),
            params: self.params.cast(),
            mode: self.mode,
        }
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    /// Forward pass keeping activations for [`Model::backward`].
    pub fn forward(&self, batch: &Tensor<T>, taps: &[&str]) -> Result<ForwardOutput<T>> {
        self.run(batch, taps, true)
    }

    /// Forward pass without retaining activations.
    pub fn infer(&self, batch: &Tensor<T>, taps: &[&str]) -> Result<ForwardOutput<T>> {
        self.run(batch, taps, false)
    }

    fn run(&self, batch: &Tensor<T>, taps: &[&str], keep: bool) -> Result<ForwardOutput<T>> {
        let (_, c, h, w) = batch.dims4()?;
        if c != self.arch.in_channels {
            return Err(dim_err!(
                "model expects {} input channels, batch has {c}",
                self.arch.in_channels
            ));
        }
        let total_down = self.arch.stages.len() - 1;
        let f = 1usize << total_down;
        if h % f != 0 || w % f != 0 {
            return Err(config_err!(
                "input {h}x{w} is not divisible through {total_down} down-samplings"
            ));
        }
        let points = taps
            .iter()
            .map(|t| self.arch.resolve_tap(t).map(|p| (t.to_string(), p.layer)))
            .collect::<Result<Vec<_>>>()?;

        let layers = self.arch.layers();
        let mut acts: Vec<Tensor<T>> = Vec::with_capacity(layers.len());
        let mut pooled = Vec::with_capacity(layers.len());
        let mut features = Vec::new();
        let mut current = batch.clone();
        for (li, l) in layers.iter().enumerate() {
            let x = if l.pooled {
                let (_, _, ch, cw) = current.dims4()?;
                let p = ops::adaptive_avg_pool(&current, ch / 2, cw / 2)?;
                if keep {
                    pooled.push(Some(p.clone()));
                }
                p
            } else {
                if keep {
                    pooled.push(None);
                }
                current
            };
            let mut y = conv2d(&x, self.params.expect(&format!("{}.weight", l.name))?, 1, PADDING)?;
            ops::add_channel_bias(&mut y, self.params.expect(&format!("{}.bias", l.name))?)?;
            let a = ops::relu(&y);
            for (name, _) in points.iter().filter(|(_, layer)| *layer == li) {
                features.push((name.clone(), a.clone()));
            }
            if keep {
                acts.push(a.clone());
            }
            current = a;
        }
        let gap = ops::global_avg_pool(&current)?;
        let logits = ops::linear(&gap, self.params.expect("fc.weight")?, self.params.expect("fc.bias")?)?;
        let cache = keep.then(|| ForwardCache {
            input: batch.clone(),
            acts,
            pooled,
            gap,
        });
        Ok(ForwardOutput {
            logits,
            features,
            cache,
        })
    }

    /// Gradients of a loss with respect to every parameter, given the loss
    /// gradient at the logits and at any subset of the requested taps.
    pub fn backward(
        &self,
        out: &ForwardOutput<T>,
        grad_logits: &Tensor<T>,
        tap_grads: &[(String, Tensor<T>)],
    ) -> Result<ParamSet<T>> {
        let cache = out
            .cache
            .as_ref()
            .ok_or_else(|| Error::Usage("backward needs a forward pass that kept activations".into()))?;
        let layers = self.arch.layers();
        let mut grads = ParamSet::new();

        let head = ops::linear_backward(&cache.gap, self.params.expect("fc.weight")?, grad_logits)?;
        let (_, _, lh, lw) = cache.acts[layers.len() - 1].dims4()?;
        let mut g_act = ops::global_avg_pool_backward(&head.input, lh, lw)?;

        let mut tap_at: Vec<Vec<&Tensor<T>>> = vec![Vec::new(); layers.len()];
        for (name, g) in tap_grads {
            let p = self.arch.resolve_tap(name)?;
            tap_at[p.layer].push(g);
        }

        let mut layer_grads = Vec::with_capacity(layers.len());
        for li in (0..layers.len()).rev() {
            let l = &layers[li];
            for g in &tap_at[li] {
                g_act.add_scaled(g, T::one())?;
            }
            let g_pre = ops::relu_backward(&cache.acts[li], &g_act)?;
            let g_bias = ops::channel_bias_grad(&g_pre)?;
            let x = match (&cache.pooled[li], li) {
                (Some(p), _) => p,
                (None, 0) => &cache.input,
                (None, _) => &cache.acts[li - 1],
            };
            let weight = self.params.expect(&format!("{}.weight", l.name))?;
            let (g_x, g_w) = conv2d_backward(x, weight, &g_pre, 1, PADDING)?;
            layer_grads.push((l.name.clone(), g_w, g_bias));
            if li > 0 {
                g_act = if l.pooled {
                    let (_, _, ph, pw) = cache.acts[li - 1].dims4()?;
                    ops::adaptive_avg_pool_backward(&g_x, ph, pw)?
                } else {
                    g_x
                };
            }
        }
        for (name, g_w, g_b) in layer_grads.into_iter().rev() {
            grads.insert(format!("{name}.weight"), g_w)?;
            grads.insert(format!("{name}.bias"), g_b)?;
        }
        grads.insert("fc.weight", head.weight)?;
        grads.insert("fc.bias", head.bias)?;
        Ok(grads)
    }

    /// Applies `grads` with `opt`. Frozen (eval-mode) models refuse.
    pub fn step(&mut self, opt: &mut Sgd<T>, grads: &ParamSet<T>, lr: f64) -> Result<()> {
        if self.mode != Mode::Train {
            return Err(Error::Usage("cannot step a frozen model".into()));
        }
        opt.step(&mut self.params, grads, lr)
    }
}
