//! The single training loop shared by teacher training and distillation.

use std::collections::HashMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{Augment, BatchIter, Dataset};
use crate::distill::{self, DistillConfig, DistillHeads, DistillMode, TeacherOutputs};
use crate::error::{config_err, Error, Result};
use crate::models::Model;
use crate::ops;
use crate::params::Sgd;
use crate::seed;
use crate::tensor::Tensor;
use crate::vocab::{quantize_feature_map, Vocabulary};

/// Optimisation settings for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// `(first epoch, lr)` pairs, sorted, starting at epoch 0.
    pub lr_schedule: Vec<(usize, f64)>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub augment: Augment,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 64,
            lr_schedule: vec![(0, 0.05), (40, 0.005), (50, 0.0005)],
            momentum: 0.9,
            weight_decay: 5e-4,
            augment: Augment::Flip,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(config_err!("epochs and batch_size must be ≥ 1"));
        }
        if self.lr_schedule.first().map(|&(e, _)| e) != Some(0) {
            return Err(config_err!("lr schedule must start at epoch 0"));
        }
        if self.lr_schedule.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(config_err!("lr schedule epochs must increase"));
        }
        if self.lr_schedule.iter().any(|&(_, lr)| !(lr > 0.0) || !lr.is_finite()) {
            return Err(config_err!("learning rates must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(config_err!("momentum must lie in [0, 1) and weight_decay be ≥ 0"));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_schedule
            .iter()
            .take_while(|&&(e, _)| e <= epoch)
            .last()
            .map_or(self.lr_schedule[0].1, |&(_, lr)| lr)
    }
}

/// The averaged training-loss terms of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub cls: f64,
    pub distill: f64,
}

/// One line of a metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub mode: String,
    pub lr: f64,
    pub train_loss: LossTerms,
    pub train_acc: f64,
    pub test_acc: f64,
    pub avg_max_teacher_assignment_prob: Option<f64>,
    /// Seconds since the run started; only recorded on request, so that
    /// metrics files stay byte-reproducible by default.
    pub wall_time: Option<f64>,
}

/// Teacher outputs memoised per `(sample, flipped)`. The teacher is frozen
/// and its forward pass is computed one sample at a time, so a cached entry
/// is bit-identical to a fresh evaluation.
pub struct TeacherCache {
    teacher: Model<f32>,
    taps: Vec<String>,
    entries: HashMap<(usize, bool), (Vec<f32>, Vec<Vec<f32>>)>,
    /// Per tap, the feature shape of one sample.
    shapes: Vec<Vec<usize>>,
    classes: usize,
}

impl TeacherCache {
    pub fn new(mut teacher: Model<f32>, taps: &[&str]) -> Result<Self> {
        teacher.freeze();
        let mut taps: Vec<String> = taps.iter().map(|t| t.to_string()).collect();
        taps.sort_unstable();
        taps.dedup();
        for t in &taps {
            teacher.arch.resolve_tap(t)?;
        }
        let classes = teacher.arch.num_classes;
        Ok(Self {
            teacher,
            taps,
            entries: HashMap::new(),
            shapes: Vec::new(),
            classes,
        })
    }

    pub fn teacher(&self) -> &Model<f32> {
        &self.teacher
    }

    pub fn covers(&self, taps: &[&str]) -> bool {
        taps.iter().all(|t| self.taps.iter().any(|c| c == t))
    }

    pub fn outputs(&mut self, dataset: &Dataset, indices: &[usize], flips: &[bool]) -> Result<TeacherOutputs<f32>> {
        let keys: Vec<(usize, bool)> = indices
            .iter()
            .enumerate()
            .map(|(j, &i)| (i, flips.get(j).copied().unwrap_or(false)))
            .collect();
        let missing: Vec<(usize, bool)> = keys.iter().copied().filter(|k| !self.entries.contains_key(k)).collect();
        if !missing.is_empty() {
            let (idx, fl): (Vec<usize>, Vec<bool>) = missing.iter().copied().unzip();
            let batch = dataset.batch(&idx, &fl)?;
            let taps: Vec<&str> = self.taps.iter().map(String::as_str).collect();
            let out = self.teacher.infer(&batch, &taps)?;
            if self.shapes.is_empty() {
                self.shapes = out.features.iter().map(|(_, t)| t.shape()[1..].to_vec()).collect();
            }
            for (j, key) in missing.into_iter().enumerate() {
                let feats = out.features.iter().map(|(_, t)| t.sample(j).to_vec()).collect();
                self.entries.insert(key, (out.logits.sample(j).to_vec(), feats));
            }
        }
        let n = keys.len();
        let mut logits = Vec::with_capacity(n * self.classes);
        let mut feats: Vec<Vec<f32>> = vec![Vec::new(); self.taps.len()];
        for k in &keys {
            let (l, f) = &self.entries[k];
            logits.extend_from_slice(l);
            for (dst, src) in feats.iter_mut().zip(f) {
                dst.extend_from_slice(src);
            }
        }
        let mut features = Vec::with_capacity(self.taps.len());
        for ((tap, data), shape) in self.taps.iter().zip(feats).zip(&self.shapes) {
            let mut full = vec![n];
            full.extend_from_slice(shape);
            features.push((tap.clone(), Tensor::new(full, data)?));
        }
        Ok(TeacherOutputs {
            logits: Tensor::new(vec![n, self.classes], logits)?,
            features,
        })
    }
}

/// Top-1 accuracy of `model` on `dataset`, in evaluation chunks of 256.
pub fn evaluate(model: &Model<f32>, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Usage("cannot evaluate on an empty dataset".into()));
    }
    let mut correct = 0usize;
    let all: Vec<usize> = (0..dataset.len()).collect();
    for chunk in all.chunks(256) {
        let out = model.infer(&dataset.batch(chunk, &[])?, &[])?;
        correct += ops::argmax_rows(&out.logits)?
            .iter()
            .zip(chunk)
            .filter(|(p, &i)| **p == dataset.labels()[i])
            .count();
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// Mean over `dataset` of the teacher's average largest assignment
/// probability at `tap`.
pub fn teacher_peakiness(teacher: &Model<f32>, dataset: &Dataset, tap: &str, vocab: &Vocabulary, tau: f64) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Usage("cannot measure peakiness on an empty dataset".into()));
    }
    let all: Vec<usize> = (0..dataset.len()).collect();
    let mut total = 0.0;
    for chunk in all.chunks(256) {
        let out = teacher.infer(&dataset.batch(chunk, &[])?, &[tap])?;
        total += quantize_feature_map(out.feature(tap)?, vocab, tau)?.mean_max_prob() * chunk.len() as f64;
    }
    Ok(total / dataset.len() as f64)
}

pub struct RunResult {
    pub student: Model<f32>,
    pub heads: DistillHeads<f32>,
    pub metrics: Vec<MetricsRecord>,
}

/// Everything a run needs besides the student.
pub struct RunSpec<'a> {
    pub train: &'a TrainConfig,
    pub distill: &'a DistillConfig,
    pub vocabs: &'a [Vocabulary],
    /// Seed for shuffling and flips.
    pub training_seed: u64,
    /// Seed for the distillation heads.
    pub heads_seed: u64,
    pub record_wall_time: bool,
}

/// Trains `student` for `spec.train.epochs` epochs with the composed loss.
/// `teacher` must be present for every mode except `none`. `on_epoch` sees
/// each metrics record as soon as it is complete.
pub fn run_training(
    mut student: Model<f32>,
    spec: &RunSpec,
    train_set: &Dataset,
    test_set: &Dataset,
    mut teacher: Option<&mut TeacherCache>,
    mut on_epoch: impl FnMut(&MetricsRecord) -> Result<()>,
) -> Result<RunResult> {
    spec.train.validate()?;
    let dc = spec.distill;
    if train_set.is_empty() || test_set.is_empty() {
        return Err(Error::Usage("training needs non-empty train and test splits".into()));
    }
    let teacher_checksum = match (&teacher, dc.mode) {
        (None, DistillMode::None) => None,
        (None, mode) => return Err(config_err!("mode {} needs a teacher", mode.name())),
        (Some(t), _) => {
            dc.check(&t.teacher().arch, &student.arch, spec.vocabs)?;
            if !t.covers(&dc.teacher_taps()) {
                return Err(config_err!("teacher cache lacks taps {:?}", dc.teacher_taps()));
            }
            Some(t.teacher().checksum())
        }
    };
    if teacher.is_none() {
        dc.validate()?;
    }
    let mut heads = match &teacher {
        Some(t) => DistillHeads::init(dc, &t.teacher().arch, &student.arch, spec.heads_seed)?,
        None => DistillHeads {
            params: Default::default(),
        },
    };
    let mut opt = Sgd::<f32>::new(spec.train.momentum, spec.train.weight_decay);
    let mut head_opt = Sgd::<f32>::new(spec.train.momentum, spec.train.weight_decay);
    let start = Instant::now();
    let mut metrics = Vec::with_capacity(spec.train.epochs);
    let empty = TeacherOutputs {
        logits: Tensor::zeros(&[1, 1])?,
        features: Vec::new(),
    };
    for epoch in 0..spec.train.epochs {
        let lr = spec.train.lr_at(epoch);
        let shuffle = seed::derive(spec.training_seed, 0x5EED);
        let iter = BatchIter::new(train_set, spec.train.batch_size, Some(shuffle), spec.train.augment, epoch as u64)?;
        let (mut total, mut cls, mut dist, mut correct, mut seen) = (0.0, 0.0, 0.0, 0usize, 0usize);
        let (mut peak, mut peak_n) = (0.0, 0usize);
        for batch in iter {
            let batch = batch?;
            let t_out = match teacher.as_deref_mut() {
                Some(t) => t.outputs(train_set, &batch.indices, &batch.flips)?,
                None => empty.clone(),
            };
            let (b, grads) = distill::loss_and_grads(
                &student,
                &heads,
                dc,
                spec.vocabs,
                &batch.images,
                &batch.labels,
                &t_out,
                true,
            )?;
            if !b.total.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {}", epoch + 1)));
            }
            let grads = grads.expect("gradients requested");
            student.step(&mut opt, &grads.student, lr)?;
            if !heads.params.is_empty() {
                head_opt.step(&mut heads.params, &grads.heads, lr)?;
            }
            let n = batch.labels.len();
            total += b.total * n as f64;
            cls += b.cls * n as f64;
            dist += b.distill * n as f64;
            correct += b.correct;
            seen += n;
            if let Some(p) = b.teacher_max_prob {
                peak += p * n as f64;
                peak_n += n;
            }
        }
        let seen_f = seen as f64;
        let record = MetricsRecord {
            epoch: epoch + 1,
            mode: dc.mode.name().to_string(),
            lr,
            train_loss: LossTerms {
                total: total / seen_f,
                cls: cls / seen_f,
                distill: dist / seen_f,
            },
            train_acc: correct as f64 / seen_f,
            test_acc: evaluate(&student, test_set)?,
            avg_max_teacher_assignment_prob: (peak_n > 0).then(|| peak / peak_n as f64),
            wall_time: spec.record_wall_time.then(|| start.elapsed().as_secs_f64()),
        };
        on_epoch(&record)?;
        metrics.push(record);
    }
    if let (Some(t), Some(sum)) = (&teacher, teacher_checksum) {
        if t.teacher().checksum() != sum {
            return Err(Error::Usage("teacher parameters changed during distillation".into()));
        }
    }
    Ok(RunResult {
        student,
        heads,
        metrics,
    })
}
