//! Acceptance suite. Prints one PASS/FAIL (or REPORT) line per criterion and
//! fails if any gated criterion fails.
//!
//! The distillation experiment trains a teacher and fifteen students, so this
//! target takes tens of minutes in release-level optimization.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use quest_core::checkpoint::{decode_checkpoint, encode_checkpoint, Checkpoint, StoredTensor};
use quest_core::data::{parse_cifar_binary, Normalization, Split, CIFAR_RECORD_BYTES};
use quest_core::distill::{
    kd_loss, kl_distill_loss, predictor_forward, DistillHeads, DistillMode, PredictorParams,
};
use quest_core::gradcheck;
use quest_core::harness::commands::{self, distill_run};
use quest_core::harness::{teacher_peakiness, ExperimentConfig, TeacherCache};
use quest_core::models::{build_model, ArchSpec, Mode};
use quest_core::vocab::{
    decode_vocabulary, encode_vocabulary, hard_assign, kmeans, quantize_feature_map, soft_assign, AssignmentMap,
    KMeansConfig, Vocabulary,
};
use quest_core::{Error, Tensor};

struct Outcome {
    id: usize,
    title: &'static str,
    gated: bool,
    passed: bool,
    detail: String,
}

fn say(line: &str) {
    // Bypasses the test harness capture so the lines show in plain `cargo test`.
    let mut out = std::io::stdout();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn record(outcomes: &mut Vec<Outcome>, o: Outcome) {
    let tag = match (o.gated, o.passed) {
        (true, true) => "PASS",
        (true, false) => "FAIL",
        (false, true) => "REPORT (holds)",
        (false, false) => "REPORT (violated)",
    };
    say(&format!("[acceptance] {tag} criterion {}: {}: {}", o.id, o.title, o.detail));
    outcomes.push(o);
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

// ---------------------------------------------------------------- criterion 1

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let report = gradcheck::run_suite(None).expect("gradient suite runs");
    let secs = start.elapsed().as_secs_f64();
    let missing: Vec<&str> = gradcheck::OPS
        .iter()
        .copied()
        .filter(|op| !report.ops.iter().any(|r| r.op == *op))
        .collect();
    let passed = report.passed() && missing.is_empty() && secs < 60.0;
    Outcome {
        id: 1,
        title: "gradient suite",
        gated: true,
        passed,
        detail: format!(
            "{} ops, worst relative error {:.2e} (limit {:.0e}), failing {:?}, missing {:?}, {secs:.1}s (limit 60s)",
            report.ops.len(),
            report.worst(),
            gradcheck::TOLERANCE,
            report.failing(),
            missing
        ),
    }
}

// ---------------------------------------------------------------- criterion 2

fn random_distances(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let scale = 10f64.powf(rng.random_range(-2.0..2.0));
    (0..k).map(|_| rng.random_range(0.0..1.0) * scale).collect()
}

fn unique_argmin(d: &[f64]) -> Option<(usize, f64)> {
    let mut idx: Vec<usize> = (0..d.len()).collect();
    idx.sort_by(|&a, &b| d[a].total_cmp(&d[b]));
    let gap = d[idx[1]] - d[idx[0]];
    (gap > 0.0).then_some((idx[0], gap))
}

fn random_vocab(rng: &mut ChaCha8Rng, k: usize, dim: usize) -> Vocabulary {
    let c: Vec<f32> = (0..k * dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    Vocabulary::new(c, k, dim, "last_conv", 0.0).unwrap()
}

/// Per-location reference: explicit distance loop and softmax in f64.
fn loop_oracle(features: &Tensor<f64>, vocab: &Vocabulary, tau: f64) -> Vec<f64> {
    let (n, c, h, w) = features.dims4().unwrap();
    let k = vocab.k();
    let mut out = vec![0.0; n * k * h * w];
    for s in 0..n {
        for y in 0..h {
            for x in 0..w {
                let mut d = vec![0.0f64; k];
                for (j, dj) in d.iter_mut().enumerate() {
                    for ch in 0..c {
                        let f = features.data()[((s * c + ch) * h + y) * w + x];
                        let v = vocab.centroid(j)[ch] as f64;
                        *dj += (f - v) * (f - v);
                    }
                }
                let p: Vec<f64> = if tau == 0.0 {
                    let best = (0..k).fold(0, |b, j| if d[j] < d[b] { j } else { b });
                    (0..k).map(|j| if j == best { 1.0 } else { 0.0 }).collect()
                } else {
                    let m = d.iter().cloned().fold(f64::INFINITY, f64::min);
                    let e: Vec<f64> = d.iter().map(|v| (-(v - m) / tau).exp()).collect();
                    let z: f64 = e.iter().sum();
                    e.iter().map(|v| v / z).collect()
                };
                for j in 0..k {
                    out[((s * k + j) * h + y) * w + x] = p[j];
                }
            }
        }
    }
    out
}

fn quantization_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0a55);
    let mut failures = Vec::new();

    let mut worst_norm = 0.0f64;
    for _ in 0..1000 {
        let k = rng.random_range(2..=128);
        let d = random_distances(&mut rng, k);
        let tau = 10f64.powf(rng.random_range(-3.0..1.0));
        let p32 = soft_assign(&d.iter().map(|&v| v as f32).collect::<Vec<_>>(), tau).unwrap();
        let p64 = soft_assign(&d, tau).unwrap();
        let s32: f64 = p32.iter().map(|&v| v as f64).sum();
        let s64: f64 = p64.iter().sum();
        worst_norm = worst_norm.max((s32 - 1.0).abs()).max((s64 - 1.0).abs());
    }
    if worst_norm > 1e-6 {
        failures.push(format!("normalization error {worst_norm:.2e}"));
    }

    let mut limit_checked = 0;
    let mut worst_limit = 0.0f64;
    while limit_checked < 1000 {
        let k = rng.random_range(2..=64);
        let d = random_distances(&mut rng, k);
        let Some((_, gap)) = unique_argmin(&d) else { continue };
        let hard = hard_assign(&d);
        let exact = soft_assign(&d, 0.0).unwrap();
        if exact != hard {
            failures.push("soft_assign at tau = 0 differs from hard_assign".into());
        }
        let mut prev = f64::INFINITY;
        for tau in [gap / 5.0, gap / 10.0, gap / 20.0, gap / 40.0] {
            let soft = soft_assign(&d, tau).unwrap();
            let err = soft.iter().zip(&hard).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if err > prev + 1e-15 {
                failures.push(format!("distance to hard assignment grew as tau shrank ({err:.2e} > {prev:.2e})"));
            }
            prev = err;
        }
        worst_limit = worst_limit.max(prev);
        limit_checked += 1;
    }
    if worst_limit > 1e-12 {
        failures.push(format!("tau = gap/40 still {worst_limit:.2e} from hard assignment"));
    }

    let taus = [0.0, 1e-3, 0.01, 0.05, 0.2, 0.5, 1.0, 2.0, 5.0, 20.0];
    let mut monotone_violations = 0;
    for _ in 0..200 {
        let k = rng.random_range(2..=64);
        let d = random_distances(&mut rng, k);
        let peaks: Vec<f64> = taus
            .iter()
            .map(|&t| soft_assign(&d, t).unwrap().into_iter().fold(0.0, f64::max))
            .collect();
        monotone_violations += peaks.windows(2).filter(|w| w[1] > w[0] + 1e-12).count();
    }
    let vocab = random_vocab(&mut rng, 16, 6);
    let fmap = Tensor::<f64>::from_fn(&[3, 6, 5, 4], |_| rng.random_range(-1.5..1.5)).unwrap();
    let map_peaks: Vec<f64> = taus
        .iter()
        .map(|&t| quantize_feature_map(&fmap, &vocab, t).unwrap().mean_max_prob())
        .collect();
    monotone_violations += map_peaks.windows(2).filter(|w| w[1] > w[0] + 1e-12).count();
    if monotone_violations > 0 {
        failures.push(format!("{monotone_violations} peakiness increases with tau"));
    }

    let mut worst_oracle = 0.0f64;
    let mut worst_f32 = 0.0f64;
    for i in 0..20 {
        let k = rng.random_range(2..=24);
        let c = rng.random_range(1..=12);
        let (n, h, w) = (rng.random_range(1..=3), rng.random_range(1..=6), rng.random_range(1..=6));
        let vocab = random_vocab(&mut rng, k, c);
        let f = Tensor::<f64>::from_fn(&[n, c, h, w], |_| rng.random_range(-1.5..1.5)).unwrap();
        let tau = [0.0, 0.05, 0.2, 1.0, 3.0][i % 5];
        let got = quantize_feature_map(&f, &vocab, tau).unwrap();
        let want = loop_oracle(&f, &vocab, tau);
        let err = got.probs.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let got32 = quantize_feature_map(&f.cast::<f32>(), &vocab, tau).unwrap();
        let err32 = if tau == 0.0 {
            0.0
        } else {
            got32.probs.data().iter().zip(&want).map(|(&a, b)| (a as f64 - b).abs()).fold(0.0, f64::max)
        };
        worst_oracle = worst_oracle.max(err);
        worst_f32 = worst_f32.max(err32);
    }
    if worst_oracle > 1e-6 {
        failures.push(format!("quantize_feature_map differs from loop oracle by {worst_oracle:.2e}"));
    }

    Outcome {
        id: 2,
        title: "quantization suite",
        gated: true,
        passed: failures.is_empty(),
        detail: format!(
            "normalization err {worst_norm:.1e} on 1000 inputs, tau->0 err {worst_limit:.1e} on 1000 vectors, \
             peakiness monotone over {} tau grids, oracle err {worst_oracle:.1e} on 20 maps (f32 path {worst_f32:.1e}, reported only){}",
            201,
            if failures.is_empty() { String::new() } else { format!("; failures: {failures:?}") }
        ),
    }
}

// ---------------------------------------------------------------- criterion 3

fn brute_force_two_means(x: &[f64]) -> f64 {
    let m = x.len();
    let mut best = f64::INFINITY;
    for mask in 1u32..(1 << m) - 1 {
        let mut obj = 0.0;
        for side in [true, false] {
            let pts: Vec<f64> = (0..m).filter(|&i| ((mask >> i) & 1 == 1) == side).map(|i| x[i]).collect();
            let mean = pts.iter().sum::<f64>() / pts.len() as f64;
            obj += pts.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
        }
        best = best.min(obj);
    }
    best
}

fn kmeans_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x4b4d);
    let mut failures = Vec::new();

    let mut runs = 0;
    for trial in 0..300 {
        let dim = rng.random_range(1..=5);
        let m = rng.random_range(2..=60);
        let k = rng.random_range(1..=m.min(8));
        let pts: Vec<f64> = (0..m * dim).map(|_| rng.random_range(-3.0..3.0)).collect();
        let cfg = KMeansConfig {
            restarts: 1,
            ..KMeansConfig::new(k, trial)
        };
        let fit = kmeans(&pts, dim, &cfg).unwrap();
        runs += 1;
        if let Some(w) = fit.history.windows(2).find(|w| w[1] > w[0] * (1.0 + 1e-12) + 1e-12) {
            failures.push(format!("objective rose from {} to {} (trial {trial})", w[0], w[1]));
        }
    }

    let mut instances = 0;
    let mut worst_gap = 0.0f64;
    for m in 2..=8usize {
        for trial in 0..150u64 {
            let x: Vec<f64> = if trial % 3 == 0 {
                // ties on purpose; fewer than 2 distinct values is an error case, not an instance
                loop {
                    let x: Vec<f64> = (0..m).map(|_| rng.random_range(0..5) as f64).collect();
                    if x.iter().any(|&v| v != x[0]) {
                        break x;
                    }
                }
            } else {
                (0..m).map(|_| rng.random_range(-10.0..10.0)).collect()
            };
            // Lloyd is a local method: on the hardest instance seen, only 2.6% of
            // k-means++ seedings reach the optimal basin, so 200 restarts miss it
            // with probability about 0.5%.
            let cfg = KMeansConfig {
                restarts: 200,
                ..KMeansConfig::new(2, trial)
            };
            let fit = kmeans(&x, 1, &cfg).unwrap();
            let best = brute_force_two_means(&x);
            let gap = (fit.objective - best).abs();
            worst_gap = worst_gap.max(gap);
            if gap > 1e-9 * best.max(1.0) {
                failures.push(format!("1-D m={m}: kmeans {} vs optimum {best} on {x:?}", fit.objective));
            }
            instances += 1;
        }
    }

    let mut zero_cases = 0;
    for m in 1..=12usize {
        let dim = 1 + m % 3;
        let pts: Vec<f64> = (0..m * dim).map(|i| (i * i) as f64 * 0.37 - i as f64).collect();
        let fit = kmeans(&pts, dim, &KMeansConfig::new(m, m as u64)).unwrap();
        if fit.objective != 0.0 {
            failures.push(format!("K = M = {m} left objective {}", fit.objective));
        }
        zero_cases += 1;
    }

    Outcome {
        id: 3,
        title: "k-means suite",
        gated: true,
        passed: failures.is_empty(),
        detail: format!(
            "{runs} runs monotone, {instances} 1-D instances vs brute force (worst gap {worst_gap:.1e}), \
             {zero_cases} K = M cases at objective 0{}",
            if failures.is_empty() { String::new() } else { format!("; failures: {:?}", &failures[..failures.len().min(5)]) }
        ),
    }
}

// ---------------------------------------------------------------- criterion 4

fn analytic_suite() -> Outcome {
    let ln2 = std::f64::consts::LN_2;
    let mut checks = Vec::new();

    let p = soft_assign(&[0.0, 3f64.ln()], 1.0).unwrap();
    checks.push(("soft_assign [0, ln 3]", (p[0] - 0.75).abs().max((p[1] - 0.25).abs()), 1e-12));

    let map = |v: [f64; 2]| AssignmentMap {
        probs: Tensor::new(vec![1, 2, 1, 1], v.to_vec()).unwrap(),
        temperature: 1.0,
    };
    let kl = kl_distill_loss(&map([1.0, 0.0]), &map([0.5, 0.5])).unwrap();
    checks.push(("single-location KL", (kl - ln2).abs(), 1e-9));

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let f = Tensor::<f64>::from_fn(&[2, 5, 3, 3], |_| rng.random_range(-2.0..2.0)).unwrap();
    let w = Tensor::<f64>::from_fn(&[5, 7], |_| rng.random_range(-1.0..1.0)).unwrap();
    let (ps, _) = predictor_forward(&f, &PredictorParams::new(w, 0.0).unwrap()).unwrap();
    let uni = ps.probs.data().iter().map(|v| (v - 1.0 / 7.0).abs()).fold(0.0, f64::max);
    checks.push(("gamma = 0 predictor uniform", uni, 1e-9));

    let z = Tensor::<f64>::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
    let kd1 = kd_loss(&z, &z, 1.0).unwrap();
    checks.push(("KD loss at rho = 1", (kd1 - ln2).abs(), 1e-9));
    let kd2 = kd_loss(&z, &z, 2.0).unwrap();
    checks.push(("KD loss at rho = 2 is four times", (kd2 - 4.0 * kd1).abs(), 1e-9));

    let failing: Vec<&str> = checks.iter().filter(|(_, e, tol)| e > tol).map(|(n, _, _)| *n).collect();
    Outcome {
        id: 4,
        title: "analytic examples",
        gated: true,
        passed: failing.is_empty(),
        detail: checks
            .iter()
            .map(|(n, e, tol)| format!("{n}: err {e:.1e} (tol {tol:.0e})"))
            .collect::<Vec<_>>()
            .join("; "),
    }
}

// ------------------------------------------------------- criteria 5, 6, 7, 8

struct Experiment {
    teacher_acc: f64,
    none: Vec<f64>,
    quest: Vec<f64>,
    regression: Vec<f64>,
    peakiness: f64,
    rank1: f64,
    top10: f64,
    mean_rank: f64,
    queries: usize,
    secs: f64,
}

const SEEDS: [u64; 5] = [11, 12, 13, 14, 15];

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn run_experiment(out: &Path) -> quest_core::Result<Experiment> {
    let start = Instant::now();
    let mut cfg = ExperimentConfig::load(&configs_dir().join("desk.ini"))?;
    cfg.output_dir = out.to_path_buf();

    let teacher_report = commands::cmd_train_teacher(&cfg)?;
    let vocabs: Vec<Vocabulary> = commands::cmd_build_vocab(&cfg)?.into_iter().map(|(_, v)| v).collect();
    let teacher = commands::load_teacher(&cfg)?;
    let (train, test) = cfg.datasets()?;
    let level = cfg.distill.levels[0].clone();
    let peakiness = teacher_peakiness(&teacher, &test, &level.teacher_tap, &vocabs[0], level.tau)?;
    say(&format!(
        "[experiment] teacher test accuracy {:.4}, peakiness {peakiness:.4}, {:.0}s elapsed",
        teacher_report.test_acc,
        start.elapsed().as_secs_f64()
    ));

    let mut cache = TeacherCache::new(teacher.clone(), &cfg.distill.teacher_taps())?;
    let (mut none, mut quest, mut regression) = (Vec::new(), Vec::new(), Vec::new());
    let mut first_quest = None;
    // feature regression belongs to the ordering criterion, not the timed experiment
    let mut regression_secs = 0.0;
    for &seed in &SEEDS {
        for mode in [DistillMode::None, DistillMode::Quest, DistillMode::FeatureRegression] {
            let mut run_cfg = cfg.clone();
            run_cfg.override_seed(seed);
            run_cfg.distill.mode = mode;
            let stem = format!("seed{seed}_{}", mode.name());
            let run_start = Instant::now();
            let (report, run) = distill_run(&run_cfg, Some(&mut cache), &vocabs, (&train, &test), &stem)?;
            say(&format!(
                "[experiment] seed {seed} {:<18} test accuracy {:.4} ({:.0}s elapsed)",
                mode.name(),
                report.final_test_acc,
                start.elapsed().as_secs_f64()
            ));
            match mode {
                DistillMode::None => none.push(report.final_test_acc),
                DistillMode::Quest => {
                    quest.push(report.final_test_acc);
                    if first_quest.is_none() {
                        first_quest = Some((run_cfg, run));
                    }
                }
                _ => {
                    regression.push(report.final_test_acc);
                    regression_secs += run_start.elapsed().as_secs_f64();
                }
            }
        }
    }

    let secs = start.elapsed().as_secs_f64() - regression_secs;
    let (run_cfg, run) = first_quest.expect("quest ran");
    let mut student = run.student;
    student.freeze();
    let retrieval = commands::retrieve(&run_cfg, &teacher, &student, &run.heads, &vocabs[0], &test)?;
    Ok(Experiment {
        teacher_acc: teacher_report.test_acc,
        none,
        quest,
        regression,
        peakiness,
        rank1: retrieval.rank1_fraction,
        top10: retrieval.rows.iter().filter(|r| r.self_rank <= 10).count() as f64 / retrieval.rows.len().max(1) as f64,
        mean_rank: retrieval.mean_self_rank,
        queries: retrieval.rows.len(),
        secs,
    })
}

fn experiment_outcomes(outcomes: &mut Vec<Outcome>) {
    let dir = tempfile::tempdir().unwrap();
    let exp = match run_experiment(dir.path()) {
        Ok(e) => e,
        Err(e) => {
            for (id, title, gated) in [
                (5, "desk-scale distillation", true),
                (6, "baseline ordering", false),
                (7, "retrieval alignment", true),
                (8, "teacher peakiness", false),
            ] {
                record(
                    outcomes,
                    Outcome {
                        id,
                        title,
                        gated,
                        passed: false,
                        detail: format!("experiment aborted: {e}"),
                    },
                );
            }
            return;
        }
    };
    let (mn, mq, mr) = (mean(&exp.none), mean(&exp.quest), mean(&exp.regression));
    let gain = mq - mn;
    record(
        outcomes,
        Outcome {
            id: 5,
            title: "desk-scale distillation",
            gated: true,
            passed: exp.teacher_acc >= 0.95 && gain >= 0.005 && exp.secs < 1800.0,
            detail: format!(
                "teacher {:.4} (need >= 0.95); quest mean {mq:.4} vs none mean {mn:.4} over {} seeds, \
                 gain {:+.2} points (need >= +0.50); teacher, vocabulary and none/quest students took {:.0}s (target < 1800s); quest {:?} none {:?}",
                exp.teacher_acc,
                SEEDS.len(),
                100.0 * gain,
                exp.secs,
                exp.quest,
                exp.none
            ),
        },
    );
    record(
        outcomes,
        Outcome {
            id: 6,
            title: "baseline ordering",
            gated: false,
            passed: mq >= mr,
            detail: format!("quest mean {mq:.4} vs feature_regression mean {mr:.4}; feature_regression {:?}", exp.regression),
        },
    );
    record(
        outcomes,
        Outcome {
            id: 7,
            title: "retrieval alignment",
            gated: true,
            passed: exp.queries == 100 && exp.rank1 >= 0.9,
            detail: format!(
                "{} queries, rank-1 self retrieval {:.3} (need >= 0.90); within top 10 {:.3}, mean self rank {:.2}",
                exp.queries, exp.rank1, exp.top10, exp.mean_rank
            ),
        },
    );
    record(
        outcomes,
        Outcome {
            id: 8,
            title: "teacher peakiness",
            gated: false,
            passed: exp.peakiness.is_finite(),
            detail: format!("mean max assignment probability at tau = 0.2: {:.4}", exp.peakiness),
        },
    );
}

// ---------------------------------------------------------------- criterion 9

fn smoke_pipeline(out: &Path) -> quest_core::Result<()> {
    let mut cfg = ExperimentConfig::load(&configs_dir().join("smoke.ini"))?;
    cfg.output_dir = out.to_path_buf();
    commands::cmd_train_teacher(&cfg)?;
    commands::cmd_build_vocab(&cfg)?;
    for mode in [DistillMode::Quest, DistillMode::Kd, DistillMode::FeatureRegression, DistillMode::None] {
        cfg.distill.mode = mode;
        commands::cmd_distill(&cfg)?;
    }
    Ok(())
}

fn file_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let result = smoke_pipeline(a.path()).and_then(|_| smoke_pipeline(b.path()));
    let (passed, detail) = match result {
        Err(e) => (false, format!("pipeline failed: {e}")),
        Ok(()) => {
            let (fa, fb) = (file_bytes(a.path()), file_bytes(b.path()));
            let metrics = fa.iter().filter(|(n, _)| n.ends_with(".jsonl")).count();
            let differing: Vec<&str> = fa
                .iter()
                .zip(&fb)
                .filter(|(x, y)| x != y)
                .map(|(x, _)| x.0.as_str())
                .collect();
            let same_names = fa.iter().map(|f| &f.0).eq(fb.iter().map(|f| &f.0));
            (
                same_names && differing.is_empty() && metrics == 5,
                format!(
                    "{} artifacts ({metrics} metrics files) from two runs of the smoke pipeline, differing: {differing:?}",
                    fa.len()
                ),
            )
        }
    };
    Outcome {
        id: 9,
        title: "determinism",
        gated: true,
        passed,
        detail,
    }
}

// --------------------------------------------------------------- criterion 10

fn formats() -> Outcome {
    let mut failures = Vec::new();

    let arch = ArchSpec::new(3, ArchSpec::parse_stages("6x1,10x2").unwrap(), 5).unwrap();
    let model = build_model::<f32>(&arch, 9).unwrap();
    let student_arch = ArchSpec::new(3, ArchSpec::parse_stages("4x1,6x1").unwrap(), 5).unwrap();
    let dc = quest_core::distill::DistillConfig {
        mode: DistillMode::Quest,
        levels: vec![quest_core::distill::Level {
            teacher_tap: "last_conv".into(),
            student_tap: "last_conv".into(),
            k: 7,
            tau: 0.2,
        }],
        ..Default::default()
    };
    let heads = DistillHeads::<f32>::init(&dc, &arch, &student_arch, 2).unwrap();
    let mut ckpt = Checkpoint::new();
    ckpt.add_model(&model).unwrap();
    ckpt.add_params("heads.", &heads.params).unwrap();
    ckpt.set_meta("role", "teacher").unwrap();
    ckpt.insert("extra.f64", StoredTensor::F64(Tensor::new(vec![3], vec![0.1, -2.5e-300, f64::MAX]).unwrap()))
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (p1, p2) = (dir.path().join("a.qckp"), dir.path().join("b.qckp"));
    ckpt.save(&p1).unwrap();
    Checkpoint::load(&p1).unwrap().save(&p2).unwrap();
    let (b1, b2) = (std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    if b1 != b2 {
        failures.push("checkpoint save-load-save changed bytes".to_string());
    }
    if encode_checkpoint(&decode_checkpoint(&b1).unwrap()) != b1 {
        failures.push("checkpoint encode/decode not bit-exact".to_string());
    }
    let reloaded = Checkpoint::load(&p1).unwrap().model(Mode::Eval).unwrap();
    if reloaded.params.checksum() != model.params.checksum() {
        failures.push("checkpoint model parameters changed".to_string());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let vocab = random_vocab(&mut rng, 9, 13);
    let (v1, v2) = (dir.path().join("a.qvwv"), dir.path().join("b.qvwv"));
    vocab.save(&v1).unwrap();
    Vocabulary::load(&v1).unwrap().save(&v2).unwrap();
    let (w1, w2) = (std::fs::read(&v1).unwrap(), std::fs::read(&v2).unwrap());
    if w1 != w2 || encode_vocabulary(&decode_vocabulary(&w1).unwrap()) != w1 {
        failures.push("vocabulary round trip changed bytes".to_string());
    }

    let mut good = vec![3u8; 2 * CIFAR_RECORD_BYTES];
    good[CIFAR_RECORD_BYTES] = 9;
    if parse_cifar_binary(&good, &Normalization::IDENTITY, Split::Train).map(|d| d.len()).ok() != Some(2) {
        failures.push("well-formed CIFAR records rejected".to_string());
    }
    let mut bad_label = good.clone();
    bad_label[0] = 10;
    let truncated = &good[..good.len() - 1];
    let malformed: [(&str, &[u8]); 3] = [
        ("truncated record", truncated),
        ("label out of range", &bad_label),
        ("single byte", &good[..1]),
    ];
    let mut rejected = 0;
    for (what, bytes) in malformed {
        match parse_cifar_binary(bytes, &Normalization::IDENTITY, Split::Train) {
            Err(Error::Format(_)) => rejected += 1,
            other => failures.push(format!("{what}: expected a format error, got {:?}", other.map(|d| d.len()))),
        }
    }

    Outcome {
        id: 10,
        title: "format round trips",
        gated: true,
        passed: failures.is_empty(),
        detail: format!(
            "checkpoint {} bytes and vocabulary {} bytes stable through save-load-save; {rejected}/3 malformed CIFAR inputs rejected{}",
            b1.len(),
            w1.len(),
            if failures.is_empty() { String::new() } else { format!("; failures: {failures:?}") }
        ),
    }
}

#[test]
fn acceptance() {
    let mut outcomes = Vec::new();
    record(&mut outcomes, gradient_suite());
    record(&mut outcomes, quantization_suite());
    record(&mut outcomes, kmeans_suite());
    record(&mut outcomes, analytic_suite());
    record(&mut outcomes, determinism());
    record(&mut outcomes, formats());
    experiment_outcomes(&mut outcomes);
    outcomes.sort_by_key(|o| o.id);

    say("[acceptance] summary");
    for o in &outcomes {
        let status = match (o.gated, o.passed) {
            (true, true) => "PASS",
            (true, false) => "FAIL",
            (false, _) => "REPORT",
        };
        say(&format!("[acceptance]   {:>2} {:<26} {status}", o.id, o.title));
    }
    let failed: Vec<usize> = outcomes.iter().filter(|o| o.gated && !o.passed).map(|o| o.id).collect();
    assert!(failed.is_empty(), "acceptance criteria failed: {failed:?}");
}
