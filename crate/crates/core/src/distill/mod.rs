//! Student-side distillation: the assignment predictor, the KL, KD and
//! feature-regression losses, and their composition with the supervised term.

mod losses;
mod predictor;

pub use losses::{
    feature_regression_loss, feature_regression_loss_backward, kd_loss, kd_loss_backward, kl_distill_loss,
    kl_distill_loss_backward, spatial_match, Pooled, RegressionGrads, Regressor,
};
pub use predictor::{
    predictor_backward, predictor_forward, PredictorCache, PredictorGrads, PredictorParams, GAMMA_INIT, NORM_CLAMP,
};

use crate::error::{config_err, Result};
use crate::models::{ArchSpec, Model};
use crate::ops;
use crate::params::ParamSet;
use crate::seed;
use crate::tensor::{Scalar, Tensor};
use crate::vocab::{quantize_feature_map, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistillMode {
    Quest,
    Kd,
    FeatureRegression,
    None,
}

impl DistillMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "quest" => Ok(Self::Quest),
            "kd" => Ok(Self::Kd),
            "feature_regression" => Ok(Self::FeatureRegression),
            "none" => Ok(Self::None),
            other => Err(config_err!(
                "unknown distillation mode '{other}' (quest, kd, feature_regression, none)"
            )),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Quest => "quest",
            Self::Kd => "kd",
            Self::FeatureRegression => "feature_regression",
            Self::None => "none",
        }
    }

    fn uses_levels(self) -> bool {
        matches!(self, Self::Quest | Self::FeatureRegression)
    }
}

/// One teacher/student tap pairing.
#[derive(Debug, Clone, PartialEq)]
pub struct Level {
    pub teacher_tap: String,
    pub student_tap: String,
    /// Vocabulary size.
    pub k: usize,
    /// Assignment temperature; 0 is hard assignment.
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    pub alpha: f64,
    pub beta: f64,
    pub rho: f64,
    pub mode: DistillMode,
    pub levels: Vec<Level>,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            rho: 4.0,
            mode: DistillMode::None,
            levels: Vec::new(),
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) {
            return Err(config_err!("loss weights must be ≥ 0 (alpha={}, beta={})", self.alpha, self.beta));
        }
        if !(self.rho > 0.0) {
            return Err(config_err!("KD temperature must be positive, got {}", self.rho));
        }
        if self.mode.uses_levels() && self.levels.is_empty() {
            return Err(config_err!("mode {} needs at least one level", self.mode.name()));
        }
        for l in &self.levels {
            if !(l.tau >= 0.0) {
                return Err(config_err!("level {}:{} has tau {}", l.teacher_tap, l.student_tap, l.tau));
            }
            if l.k == 0 {
                return Err(config_err!("level {}:{} has K=0", l.teacher_tap, l.student_tap));
            }
        }
        Ok(())
    }

    /// Levels that contribute to the loss in the configured mode.
    pub fn active_levels(&self) -> &[Level] {
        if self.mode.uses_levels() {
            &self.levels
        } else {
            &[]
        }
    }

    pub fn teacher_taps(&self) -> Vec<&str> {
        self.active_levels().iter().map(|l| l.teacher_tap.as_str()).collect()
    }

    pub fn student_taps(&self) -> Vec<&str> {
        self.active_levels().iter().map(|l| l.student_tap.as_str()).collect()
    }

    /// Checks taps against both architectures and, in quest mode, that one
    /// vocabulary per level is present with matching K and width.
    pub fn check(&self, teacher: &ArchSpec, student: &ArchSpec, vocabs: &[Vocabulary]) -> Result<()> {
        self.validate()?;
        if teacher.num_classes != student.num_classes {
            return Err(config_err!(
                "teacher predicts {} classes, student {}",
                teacher.num_classes,
                student.num_classes
            ));
        }
        for l in self.active_levels() {
            teacher.resolve_tap(&l.teacher_tap)?;
            student.resolve_tap(&l.student_tap)?;
        }
        if self.mode == DistillMode::Quest {
            if vocabs.len() != self.levels.len() {
                return Err(config_err!(
                    "quest mode needs one vocabulary per level: {} levels, {} vocabularies",
                    self.levels.len(),
                    vocabs.len()
                ));
            }
            for (l, v) in self.levels.iter().zip(vocabs) {
                let c_t = teacher.resolve_tap(&l.teacher_tap)?.channels;
                if v.k() != l.k || v.dim() != c_t {
                    return Err(config_err!(
                        "vocabulary for {} has K={}, C_T={}; level expects K={}, C_T={c_t}",
                        l.teacher_tap,
                        v.k(),
                        v.dim(),
                        l.k
                    ));
                }
                if !v.tap.is_empty() && v.tap != l.teacher_tap {
                    return Err(config_err!(
                        "vocabulary was built at tap {}, level uses {}",
                        v.tap,
                        l.teacher_tap
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Trainable student-side heads for every level, stored under
/// `level{i}.predictor.{weight,gamma}` and `level{i}.regressor.{weight,bias}`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillHeads<T: Scalar = f32> {
    pub params: ParamSet<T>,
}

impl<T: Scalar> DistillHeads<T> {
    pub fn init(config: &DistillConfig, teacher: &ArchSpec, student: &ArchSpec, seed: u64) -> Result<Self> {
        let mut params = ParamSet::new();
        for (i, l) in config.active_levels().iter().enumerate() {
            let c_s = student.resolve_tap(&l.student_tap)?.channels;
            let c_t = teacher.resolve_tap(&l.teacher_tap)?.channels;
            match config.mode {
                DistillMode::Quest => {
                    let p = PredictorParams::<T>::init(c_s, l.k, seed::derive(seed, 2 * i as u64))?;
                    params.insert(format!("level{i}.predictor.weight"), p.weight)?;
                    params.insert(format!("level{i}.predictor.gamma"), Tensor::new(vec![1], vec![p.gamma])?)?;
                }
                DistillMode::FeatureRegression if c_s != c_t => {
                    let r = Regressor::<T>::init(c_s, c_t, seed::derive(seed, 2 * i as u64 + 1))?;
                    params.insert(format!("level{i}.regressor.weight"), r.weight)?;
                    params.insert(format!("level{i}.regressor.bias"), r.bias)?;
                }
                _ => {}
            }
        }
        Ok(Self { params })
    }

    pub fn predictor(&self, level: usize) -> Result<PredictorParams<T>> {
        Ok(PredictorParams {
            weight: self.params.expect(&format!("level{level}.predictor.weight"))?.clone(),
            gamma: self.params.expect(&format!("level{level}.predictor.gamma"))?.data()[0],
        })
    }

    pub fn regressor(&self, level: usize) -> Option<Regressor<T>> {
        let weight = self.params.get(&format!("level{level}.regressor.weight"))?;
        let bias = self.params.get(&format!("level{level}.regressor.bias"))?;
        Some(Regressor {
            weight: weight.clone(),
            bias: bias.clone(),
        })
    }
}

/// Teacher logits and tap features for one batch; the teacher itself never
/// enters the student's gradient computation.
#[derive(Debug, Clone)]
pub struct TeacherOutputs<T: Scalar = f32> {
    pub logits: Tensor<T>,
    pub features: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> TeacherOutputs<T> {
    pub fn feature(&self, tap: &str) -> Result<&Tensor<T>> {
        self.features
            .iter()
            .find(|(n, _)| n == tap)
            .map(|(_, t)| t)
            .ok_or_else(|| config_err!("teacher tap '{tap}' was not computed"))
    }
}

pub fn teacher_outputs<T: Scalar>(teacher: &Model<T>, batch: &Tensor<T>, config: &DistillConfig) -> Result<TeacherOutputs<T>> {
    let mut taps = config.teacher_taps();
    taps.sort_unstable();
    taps.dedup();
    let out = teacher.infer(batch, &taps)?;
    Ok(TeacherOutputs {
        logits: out.logits,
        features: out.features,
    })
}

/// Per-term values of one loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    /// `α · cls + β · distill`.
    pub total: f64,
    pub cls: f64,
    /// Unweighted distillation term, summed over levels.
    pub distill: f64,
    pub per_level: Vec<f64>,
    /// Mean over levels of the average largest teacher assignment probability.
    pub teacher_max_prob: Option<f64>,
    /// Batch argmax accuracy of the student logits.
    pub correct: usize,
}

pub struct LossGrads<T: Scalar> {
    pub student: ParamSet<T>,
    pub heads: ParamSet<T>,
}

/// Evaluates the composed loss for one batch and, when `with_grads` is set,
/// its gradient with respect to the student and head parameters only.
#[allow(clippy::too_many_arguments)]
pub fn loss_and_grads<T: Scalar>(
    student: &Model<T>,
    heads: &DistillHeads<T>,
    config: &DistillConfig,
    vocabs: &[Vocabulary],
    batch: &Tensor<T>,
    labels: &[usize],
    teacher: &TeacherOutputs<T>,
    with_grads: bool,
) -> Result<(LossBreakdown, Option<LossGrads<T>>)> {
    if config.mode == DistillMode::Quest && vocabs.len() != config.levels.len() {
        return Err(config_err!(
            "quest mode needs one vocabulary per level: {} levels, {} vocabularies",
            config.levels.len(),
            vocabs.len()
        ));
    }
    let mut s_taps = config.student_taps();
    s_taps.sort_unstable();
    s_taps.dedup();
    let out = if with_grads {
        student.forward(batch, &s_taps)?
    } else {
        student.infer(batch, &s_taps)?
    };
    let (_, classes) = out.logits.dims2()?;
    let targets = ops::one_hot::<T>(labels, classes)?;
    let cls = ops::cross_entropy_logits(&out.logits, &targets)?;
    let correct = ops::argmax_rows(&out.logits)?
        .iter()
        .zip(labels)
        .filter(|(a, b)| a == b)
        .count();
    let alpha = T::from_f64_lossy(config.alpha);
    let beta = T::from_f64_lossy(config.beta);
    let mut grad_logits = if with_grads {
        let mut g = ops::cross_entropy_logits_backward(&out.logits, &targets)?;
        g.scale(alpha);
        Some(g)
    } else {
        None
    };
    let mut head_grads = ParamSet::new();
    let mut tap_grads: Vec<(String, Tensor<T>)> = Vec::new();
    let mut per_level = Vec::new();
    let mut max_probs = Vec::new();

    match config.mode {
        DistillMode::None => {}
        DistillMode::Kd => {
            let v = kd_loss(&teacher.logits, &out.logits, config.rho)?;
            per_level.push(v.as_f64());
            if let Some(g) = grad_logits.as_mut() {
                g.add_scaled(&kd_loss_backward(&teacher.logits, &out.logits, config.rho)?, beta)?;
            }
        }
        DistillMode::Quest | DistillMode::FeatureRegression => {
            for (i, l) in config.levels.iter().enumerate() {
                let f_t = teacher.feature(&l.teacher_tap)?;
                let f_s = out.feature(&l.student_tap)?;
                let (f_t, f_s_m, side) = spatial_match(f_t, f_s)?;
                let (value, g_fs) = if config.mode == DistillMode::Quest {
                    let p_t = quantize_feature_map(&f_t, &vocabs[i], l.tau)?;
                    max_probs.push(p_t.mean_max_prob());
                    let pred = heads.predictor(i)?;
                    if pred.k() != l.k {
                        return Err(config_err!("level {i} predictor has K={}, level expects {}", pred.k(), l.k));
                    }
                    let (p_s, cache) = predictor_forward(&f_s_m, &pred)?;
                    let v = kl_distill_loss(&p_t, &p_s)?;
                    let g = if with_grads {
                        let g_ps = kl_distill_loss_backward(&p_t, &p_s)?;
                        let pg = predictor_backward(&p_s, &cache, &g_ps)?;
                        let mut gw = pg.weight;
                        gw.scale(beta);
                        head_grads.insert(format!("level{i}.predictor.weight"), gw)?;
                        head_grads.insert(format!("level{i}.predictor.gamma"), Tensor::new(vec![1], vec![pg.gamma * beta])?)?;
                        Some(pg.features)
                    } else {
                        None
                    };
                    (v, g)
                } else {
                    let reg = heads.regressor(i);
                    let v = feature_regression_loss(&f_s_m, &f_t, reg.as_ref())?;
                    let g = if with_grads {
                        let rg = feature_regression_loss_backward(&f_s_m, &f_t, reg.as_ref())?;
                        if let Some((mut gw, mut gb)) = rg.regressor {
                            gw.scale(beta);
                            gb.scale(beta);
                            head_grads.insert(format!("level{i}.regressor.weight"), gw)?;
                            head_grads.insert(format!("level{i}.regressor.bias"), gb)?;
                        }
                        Some(rg.features)
                    } else {
                        None
                    };
                    (v, g)
                };
                per_level.push(value.as_f64());
                if let Some(mut g) = g_fs {
                    g.scale(beta);
                    if side == Pooled::Second {
                        let (_, _, h, w) = f_s.dims4()?;
                        g = ops::adaptive_avg_pool_backward(&g, h, w)?;
                    }
                    tap_grads.push((l.student_tap.clone(), g));
                }
            }
        }
    }

    let distill: f64 = per_level.iter().sum();
    let cls = cls.as_f64();
    let breakdown = LossBreakdown {
        total: config.alpha * cls + config.beta * distill,
        cls,
        distill,
        per_level,
        teacher_max_prob: (!max_probs.is_empty()).then(|| max_probs.iter().sum::<f64>() / max_probs.len() as f64),
        correct,
    };
    let grads = match grad_logits {
        Some(g) => Some(LossGrads {
            student: student.backward(&out, &g, &tap_grads)?,
            heads: head_grads,
        }),
        None => None,
    };
    Ok((breakdown, grads))
}

/// The composed loss for one batch: runs the frozen teacher, then evaluates
/// [`loss_and_grads`] without gradients.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<T: Scalar>(
    batch: &Tensor<T>,
    labels: &[usize],
    teacher: &Model<T>,
    student: &Model<T>,
    config: &DistillConfig,
    vocabs: &[Vocabulary],
    heads: &DistillHeads<T>,
) -> Result<(f64, LossBreakdown)> {
    config.check(&teacher.arch, &student.arch, vocabs)?;
    let t = teacher_outputs(teacher, batch, config)?;
    let (b, _) = loss_and_grads(student, heads, config, vocabs, batch, labels, &t, false)?;
    Ok((b.total, b))
}
