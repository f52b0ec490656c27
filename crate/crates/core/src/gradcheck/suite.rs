//! The float64 finite-difference suite over every differentiable op and the
//! composed distillation pipelines.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{finite_difference_gradient, relative_error, DEFAULT_STEP};
use crate::distill::{self, DistillConfig, DistillHeads, DistillMode, Level, PredictorParams, Regressor};
use crate::error::Result;
use crate::models::{build_model, ArchSpec, Model, Mode};
use crate::ops;
use crate::params::ParamSet;
use crate::tensor::Tensor;
use crate::vocab::{AssignmentMap, Vocabulary};

/// Largest relative error an op may show.
pub const TOLERANCE: f64 = 1e-4;

/// Every op name the suite reports, in order.
pub const OPS: &[&str] = &[
    "conv2d",
    "channel_bias",
    "relu",
    "adaptive_avg_pool",
    "global_avg_pool",
    "linear",
    "softmax",
    "log_softmax",
    "cross_entropy_logits",
    "cross_entropy_probs",
    "spatial_match",
    "predictor_forward",
    "kl_distill_loss",
    "predictor_forward+kl_distill_loss",
    "kd_loss",
    "feature_regression_loss",
    "model_forward+cross_entropy",
    "model_forward+kd_loss",
    "model_forward+feature_regression_loss",
    "total_loss(quest)",
];

#[derive(Debug, Clone, PartialEq)]
pub struct OpReport {
    pub op: &'static str,
    pub worst: f64,
    pub checks: usize,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.worst <= TOLERANCE
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub ops: Vec<OpReport>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.ops.iter().all(OpReport::passed)
    }

    pub fn failing(&self) -> Vec<&'static str> {
        self.ops.iter().filter(|r| !r.passed()).map(|r| r.op).collect()
    }

    pub fn worst(&self) -> f64 {
        self.ops.iter().fold(0.0, |m, r| m.max(r.worst))
    }
}

struct Runner {
    rng: ChaCha8Rng,
    corrupt: Option<String>,
    reports: Vec<OpReport>,
}

impl Runner {
    fn tensor(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| self.rng.random_range(lo..hi)).expect("positive shape")
    }

    /// Values bounded away from zero, for ops with a kink there.
    fn away_from_zero(&mut self, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| {
            let m = self.rng.random_range(0.1..1.0);
            if self.rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .expect("positive shape")
    }

    fn distributions(&mut self, n: usize, k: usize, h: usize, w: usize) -> AssignmentMap<f64> {
        let mut t = self.tensor(&[n, k, h, w], 0.05, 1.0);
        let hw = h * w;
        for s in 0..n {
            for loc in 0..hw {
                let total: f64 = (0..k).map(|j| t.data()[s * k * hw + j * hw + loc]).sum();
                for j in 0..k {
                    t.data_mut()[s * k * hw + j * hw + loc] /= total;
                }
            }
        }
        AssignmentMap {
            probs: t,
            temperature: 1.0,
        }
    }

    /// Records one comparison. A corrupted op has its analytic gradient
    /// perturbed first, standing in for a broken backward.
    fn record(&mut self, op: &'static str, analytic: &[f64], numeric: &[f64]) {
        let mut analytic = analytic.to_vec();
        if self.corrupt.as_deref() == Some(op) {
            for (i, v) in analytic.iter_mut().enumerate() {
                *v = *v * 1.05 + if i == 0 { 1e-3 } else { 0.0 };
            }
        }
        let err = relative_error(&analytic, numeric);
        match self.reports.iter_mut().find(|r| r.op == op) {
            Some(r) => {
                r.worst = r.worst.max(err);
                r.checks += 1;
            }
            None => self.reports.push(OpReport {
                op,
                worst: err,
                checks: 1,
            }),
        }
    }

    fn check<F>(&mut self, op: &'static str, analytic: &Tensor<f64>, x: &Tensor<f64>, f: F) -> Result<()>
    where
        F: FnMut(&Tensor<f64>) -> Result<f64>,
    {
        let numeric = finite_difference_gradient(f, x, DEFAULT_STEP)?;
        self.record(op, analytic.data(), numeric.data());
        Ok(())
    }

    /// Compares a gradient over a whole parameter set, one tensor at a time.
    fn check_params<F>(&mut self, op: &'static str, analytic: &ParamSet<f64>, params: &ParamSet<f64>, mut f: F) -> Result<()>
    where
        F: FnMut(&ParamSet<f64>) -> Result<f64>,
    {
        let mut a = Vec::new();
        let mut n = Vec::new();
        for (name, t) in params.iter() {
            let numeric = finite_difference_gradient(
                |probe| {
                    let mut p = params.clone();
                    *p.get_mut(name).expect("name from same set") = probe.clone();
                    f(&p)
                },
                t,
                DEFAULT_STEP,
            )?;
            let g = analytic
                .get(name)
                .cloned()
                .unwrap_or_else(|| t.zeros_like());
            a.extend_from_slice(g.data());
            n.extend_from_slice(numeric.data());
        }
        self.record(op, &a, &n);
        Ok(())
    }
}

fn inner(a: &Tensor<f64>, r: &Tensor<f64>) -> Result<f64> {
    a.dot(r)
}

fn primitives(r: &mut Runner) -> Result<()> {
    for (shape, kshape, stride, pad) in [
        ([2, 3, 5, 5], [4, 3, 3, 3], 1, 1),
        ([2, 2, 5, 5], [3, 2, 3, 3], 2, 0),
        ([1, 3, 4, 4], [2, 3, 1, 1], 1, 0),
    ] {
        let x = r.tensor(&shape, -1.0, 1.0);
        let k = r.tensor(&kshape, -1.0, 1.0);
        let y = ops::conv2d(&x, &k, stride, pad)?;
        let g = r.tensor(y.shape(), -1.0, 1.0);
        let (gx, gk) = ops::conv2d_backward(&x, &k, &g, stride, pad)?;
        r.check("conv2d", &gx, &x, |t| inner(&ops::conv2d(t, &k, stride, pad)?, &g))?;
        r.check("conv2d", &gk, &k, |t| inner(&ops::conv2d(&x, t, stride, pad)?, &g))?;
    }

    let x = r.tensor(&[2, 3, 2, 2], -1.0, 1.0);
    let b = r.tensor(&[3], -1.0, 1.0);
    let g = r.tensor(&[2, 3, 2, 2], -1.0, 1.0);
    r.check("channel_bias", &ops::channel_bias_grad(&g)?, &b, |t| {
        let mut y = x.clone();
        ops::add_channel_bias(&mut y, t)?;
        inner(&y, &g)
    })?;

    let x = r.away_from_zero(&[2, 3, 3, 3]);
    let g = r.tensor(&[2, 3, 3, 3], -1.0, 1.0);
    r.check("relu", &ops::relu_backward(&ops::relu(&x), &g)?, &x, |t| inner(&ops::relu(t), &g))?;

    let x = r.tensor(&[2, 3, 4, 6], -1.0, 1.0);
    let g = r.tensor(&[2, 3, 2, 3], -1.0, 1.0);
    r.check("adaptive_avg_pool", &ops::adaptive_avg_pool_backward(&g, 4, 6)?, &x, |t| {
        inner(&ops::adaptive_avg_pool(t, 2, 3)?, &g)
    })?;
    let g = r.tensor(&[2, 3], -1.0, 1.0);
    r.check("global_avg_pool", &ops::global_avg_pool_backward(&g, 4, 6)?, &x, |t| {
        inner(&ops::global_avg_pool(t)?, &g)
    })?;

    let x = r.tensor(&[3, 5], -1.0, 1.0);
    let w = r.tensor(&[4, 5], -1.0, 1.0);
    let b = r.tensor(&[4], -1.0, 1.0);
    let g = r.tensor(&[3, 4], -1.0, 1.0);
    let lg = ops::linear_backward(&x, &w, &g)?;
    r.check("linear", &lg.input, &x, |t| inner(&ops::linear(t, &w, &b)?, &g))?;
    r.check("linear", &lg.weight, &w, |t| inner(&ops::linear(&x, t, &b)?, &g))?;
    r.check("linear", &lg.bias, &b, |t| inner(&ops::linear(&x, &w, t)?, &g))?;

    for axis in [1, 2] {
        let x = r.tensor(&[2, 4, 3], -2.0, 2.0);
        let g = r.tensor(&[2, 4, 3], -1.0, 1.0);
        let p = ops::softmax(&x, axis)?;
        r.check("softmax", &ops::softmax_backward(&p, &g, axis)?, &x, |t| {
            inner(&ops::softmax(t, axis)?, &g)
        })?;
        let lp = ops::log_softmax(&x, axis)?;
        r.check("log_softmax", &ops::log_softmax_backward(&lp, &g, axis)?, &x, |t| {
            inner(&ops::log_softmax(t, axis)?, &g)
        })?;
    }

    let z = r.tensor(&[3, 5], -2.0, 2.0);
    let target = ops::softmax(&r.tensor(&[3, 5], -1.0, 1.0), 1)?;
    r.check("cross_entropy_logits", &ops::cross_entropy_logits_backward(&z, &target)?, &z, |t| {
        ops::cross_entropy_logits(t, &target)
    })?;
    let p = r.tensor(&[3, 5], 0.1, 1.0);
    r.check("cross_entropy_probs", &ops::cross_entropy_probs_backward(&p, &target)?, &p, |t| {
        ops::cross_entropy_probs(t, &target)
    })?;
    Ok(())
}

fn distillation_ops(r: &mut Runner) -> Result<()> {
    let f_t = r.tensor(&[2, 3, 2, 2], -1.0, 1.0);
    let f_s = r.tensor(&[2, 4, 4, 4], -1.0, 1.0);
    let g = r.tensor(&[2, 4, 2, 2], -1.0, 1.0);
    r.check("spatial_match", &ops::adaptive_avg_pool_backward(&g, 4, 4)?, &f_s, |t| {
        inner(&distill::spatial_match(&f_t, t)?.1, &g)
    })?;

    let (n, c, k, h, w) = (2, 4, 5, 3, 3);
    for _ in 0..2 {
        let f = r.tensor(&[n, c, h, w], -1.0, 1.0);
        let params = PredictorParams::new(r.tensor(&[c, k], -1.0, 1.0), r.rng.random_range(0.5..4.0))?;
        let gamma = Tensor::new(vec![1], vec![params.gamma])?;
        let with_gamma = |t: &Tensor<f64>| PredictorParams {
            weight: params.weight.clone(),
            gamma: t.data()[0],
        };
        let with_weight = |t: &Tensor<f64>| PredictorParams {
            weight: t.clone(),
            gamma: params.gamma,
        };

        let g = r.tensor(&[n, k, h, w], -1.0, 1.0);
        let (p, cache) = distill::predictor_forward(&f, &params)?;
        let pg = distill::predictor_backward(&p, &cache, &g)?;
        let probs = |f: &Tensor<f64>, pp: &PredictorParams<f64>| -> Result<Tensor<f64>> {
            Ok(distill::predictor_forward(f, pp)?.0.probs)
        };
        r.check("predictor_forward", &pg.features, &f, |t| inner(&probs(t, &params)?, &g))?;
        r.check("predictor_forward", &pg.weight, &params.weight, |t| {
            inner(&probs(&f, &with_weight(t))?, &g)
        })?;
        r.check("predictor_forward", &Tensor::new(vec![1], vec![pg.gamma])?, &gamma, |t| {
            inner(&probs(&f, &with_gamma(t))?, &g)
        })?;

        let p_t = r.distributions(n, k, h, w);
        let p_s = r.distributions(n, k, h, w);
        r.check("kl_distill_loss", &distill::kl_distill_loss_backward(&p_t, &p_s)?, &p_s.probs, |t| {
            distill::kl_distill_loss(
                &p_t,
                &AssignmentMap {
                    probs: t.clone(),
                    temperature: 1.0,
                },
            )
        })?;

        let kl = |f: &Tensor<f64>, pp: &PredictorParams<f64>| -> Result<f64> {
            distill::kl_distill_loss(&p_t, &distill::predictor_forward(f, pp)?.0)
        };
        let g_p = distill::kl_distill_loss_backward(&p_t, &p)?;
        let pg = distill::predictor_backward(&p, &cache, &g_p)?;
        let op = "predictor_forward+kl_distill_loss";
        r.check(op, &pg.features, &f, |t| kl(t, &params))?;
        r.check(op, &pg.weight, &params.weight, |t| kl(&f, &with_weight(t)))?;
        r.check(op, &Tensor::new(vec![1], vec![pg.gamma])?, &gamma, |t| kl(&f, &with_gamma(t)))?;
    }

    for rho in [1.0, 2.0, 4.0] {
        let z_t = r.tensor(&[3, 5], -3.0, 3.0);
        let z_s = r.tensor(&[3, 5], -3.0, 3.0);
        r.check("kd_loss", &distill::kd_loss_backward(&z_t, &z_s, rho)?, &z_s, |t| {
            distill::kd_loss(&z_t, t, rho)
        })?;
    }

    let f_t = r.tensor(&[2, 3, 2, 2], -1.0, 1.0);
    let f_s = r.tensor(&[2, 3, 2, 2], -1.0, 1.0);
    let gr = distill::feature_regression_loss_backward(&f_s, &f_t, None)?;
    r.check("feature_regression_loss", &gr.features, &f_s, |t| {
        distill::feature_regression_loss(t, &f_t, None)
    })?;
    let f_s = r.tensor(&[2, 5, 2, 2], -1.0, 1.0);
    let reg = Regressor {
        weight: r.tensor(&[3, 5, 1, 1], -1.0, 1.0),
        bias: r.tensor(&[3], -1.0, 1.0),
    };
    let gr = distill::feature_regression_loss_backward(&f_s, &f_t, Some(&reg))?;
    let (gw, gb) = gr.regressor.expect("regressor gradients");
    r.check("feature_regression_loss", &gr.features, &f_s, |t| {
        distill::feature_regression_loss(t, &f_t, Some(&reg))
    })?;
    r.check("feature_regression_loss", &gw, &reg.weight, |t| {
        let rr = Regressor {
            weight: t.clone(),
            bias: reg.bias.clone(),
        };
        distill::feature_regression_loss(&f_s, &f_t, Some(&rr))
    })?;
    r.check("feature_regression_loss", &gb, &reg.bias, |t| {
        let rr = Regressor {
            weight: reg.weight.clone(),
            bias: t.clone(),
        };
        distill::feature_regression_loss(&f_s, &f_t, Some(&rr))
    })?;
    Ok(())
}

/// Random biases so no ReLU input sits exactly at the kink.
fn jitter_biases(model: &mut Model<f64>, rng: &mut ChaCha8Rng) {
    for (name, t) in model.params.iter_mut() {
        if name.ends_with(".bias") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
        }
    }
}

fn pipelines(r: &mut Runner) -> Result<()> {
    let teacher_arch = ArchSpec::new(3, ArchSpec::parse_stages("5x1,6x1")?, 3)?;
    let student_arch = ArchSpec::new(3, ArchSpec::parse_stages("4x1,3x1")?, 3)?;
    let mut teacher = build_model::<f64>(&teacher_arch, 11)?;
    jitter_biases(&mut teacher, &mut r.rng);
    teacher.freeze();
    let mut student = build_model::<f64>(&student_arch, 12)?;
    jitter_biases(&mut student, &mut r.rng);
    let batch = r.tensor(&[2, 3, 4, 4], 0.0, 1.0);
    let labels = [0usize, 2];

    let vocab_for = |r: &mut Runner, k: usize, dim: usize, tap: &str| -> Result<Vocabulary> {
        let c: Vec<f32> = (0..k * dim).map(|_| r.rng.random_range(0.0f32..1.0)).collect();
        Vocabulary::new(c, k, dim, tap, 0.0)
    };

    let cases: Vec<(&'static str, DistillConfig, Vec<Vocabulary>)> = vec![
        (
            "model_forward+cross_entropy",
            DistillConfig {
                mode: DistillMode::None,
                ..DistillConfig::default()
            },
            vec![],
        ),
        (
            "model_forward+kd_loss",
            DistillConfig {
                alpha: 0.0,
                rho: 2.0,
                mode: DistillMode::Kd,
                ..DistillConfig::default()
            },
            vec![],
        ),
        (
            "model_forward+feature_regression_loss",
            DistillConfig {
                alpha: 0.0,
                mode: DistillMode::FeatureRegression,
                levels: vec![
                    Level {
                        teacher_tap: "stage2".into(),
                        student_tap: "stage2".into(),
                        k: 1,
                        tau: 0.0,
                    },
                    Level {
                        teacher_tap: "stage2".into(),
                        student_tap: "stage1".into(),
                        k: 1,
                        tau: 0.0,
                    },
                ],
                ..DistillConfig::default()
            },
            vec![],
        ),
        (
            "total_loss(quest)",
            DistillConfig {
                alpha: 1.0,
                beta: 0.7,
                mode: DistillMode::Quest,
                levels: vec![
                    Level {
                        teacher_tap: "stage2".into(),
                        student_tap: "stage2".into(),
                        k: 4,
                        tau: 0.2,
                    },
                    Level {
                        teacher_tap: "stage2".into(),
                        student_tap: "stage1".into(),
                        k: 3,
                        tau: 0.5,
                    },
                ],
                ..DistillConfig::default()
            },
            vec![vocab_for(r, 4, 6, "stage2")?, vocab_for(r, 3, 6, "stage2")?],
        ),
    ];

    for (op, config, vocabs) in cases {
        config.check(&teacher_arch, &student_arch, &vocabs)?;
        let t_out = distill::teacher_outputs(&teacher, &batch, &config)?;
        let mut heads = DistillHeads::<f64>::init(&config, &teacher_arch, &student_arch, 5)?;
        for (name, t) in heads.params.iter_mut() {
            if name.ends_with("gamma") {
                t.data_mut()[0] = 2.0;
            }
        }
        let (_, grads) = distill::loss_and_grads(&student, &heads, &config, &vocabs, &batch, &labels, &t_out, true)?;
        let grads = grads.expect("gradients requested");
        let eval = |s: &Model<f64>, h: &DistillHeads<f64>| -> Result<f64> {
            Ok(distill::loss_and_grads(s, h, &config, &vocabs, &batch, &labels, &t_out, false)?
                .0
                .total)
        };
        r.check_params(op, &grads.student, &student.params, |p| {
            eval(&Model::from_params(student_arch.clone(), p.clone(), Mode::Train)?, &heads)
        })?;
        if !heads.params.is_empty() {
            r.check_params(op, &grads.heads, &heads.params, |p| {
                eval(&student, &DistillHeads { params: p.clone() })
            })?;
        }
    }
    Ok(())
}

/// Runs the whole suite with a fixed seed. `corrupt` names an op whose
/// analytic gradient is deliberately perturbed, to exercise failure
/// reporting.
pub fn run_suite(corrupt: Option<&str>) -> Result<SuiteReport> {
    let mut r = Runner {
        rng: ChaCha8Rng::seed_from_u64(0x9c0d),
        corrupt: corrupt.map(str::to_string),
        reports: Vec::new(),
    };
    primitives(&mut r)?;
    distillation_ops(&mut r)?;
    pipelines(&mut r)?;
    let mut ops = r.reports;
    ops.sort_by_key(|rep| OPS.iter().position(|&o| o == rep.op));
    Ok(SuiteReport { ops })
}
