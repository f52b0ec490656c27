//! The operations behind each `quest` subcommand.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ExperimentConfig, Sweep};
use super::train::{evaluate, run_training, MetricsRecord, RunResult, RunSpec, TeacherCache};
use crate::checkpoint::Checkpoint;
use crate::data::Dataset;
use crate::distill::{self, DistillConfig, DistillHeads, DistillMode, Level};
use crate::error::{config_err, Error, Result};
use crate::gradcheck::{self, SuiteReport};
use crate::models::{build_model, Mode, Model};
use crate::seed;
use crate::vocab::{collect_features, kmeans, quantize_feature_map, KMeansConfig, Vocabulary};

/// Stream tags mixed into the named seeds.
const TEACHER_INIT: u64 = 1;
const STUDENT_INIT: u64 = 2;
const HEADS_INIT: u64 = 3;
const TEACHER_SHUFFLE: u64 = 4;
const STUDENT_SHUFFLE: u64 = 5;
const RETRIEVE_QUERIES: u64 = 6;

const HEADS_PREFIX: &str = "heads.";

/// Appends one JSON object per line, flushing after each.
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    /// Creates (or truncates) `path`.
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            out: BufWriter::new(File::create(path)?),
        })
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        let line = serde_json::to_string(record).map_err(|e| config_err!("metrics serialization: {e}"))?;
        writeln!(self.out, "{line}")?;
        self.out.flush()?;
        Ok(())
    }
}

/// Reads a metrics file back, one record per line.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    std::fs::read_to_string(path)?
        .lines()
        .map(|l| serde_json::from_str(l).map_err(|e| crate::error::Error::Format(format!("metrics line: {e}"))))
        .collect()
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn seed_meta(ckpt: &mut Checkpoint, cfg: &ExperimentConfig) -> Result<()> {
    ckpt.set_meta("seed.data", cfg.seeds.data)?;
    ckpt.set_meta("seed.model", cfg.seeds.model)?;
    ckpt.set_meta("seed.training", cfg.seeds.training)
}

pub struct TeacherReport {
    pub checkpoint: PathBuf,
    pub test_acc: f64,
    pub metrics: Vec<MetricsRecord>,
}

/// Supervised teacher training (`α = 1`, no distillation term).
pub fn cmd_train_teacher(cfg: &ExperimentConfig) -> Result<TeacherReport> {
    ensure_dir(&cfg.output_dir)?;
    let (train, test) = cfg.datasets()?;
    let model = build_model(&cfg.teacher_arch()?, seed::derive(cfg.seeds.model, TEACHER_INIT))?;
    let dc = DistillConfig {
        mode: DistillMode::None,
        beta: 0.0,
        ..DistillConfig::default()
    };
    let tc = cfg.teacher_train();
    let spec = RunSpec {
        train: &tc,
        distill: &dc,
        vocabs: &[],
        training_seed: seed::derive(cfg.seeds.training, TEACHER_SHUFFLE),
        heads_seed: 0,
        record_wall_time: cfg.record_wall_time,
    };
    let mut writer = MetricsWriter::create(&cfg.output_dir.join("teacher_metrics.jsonl"))?;
    let run = run_training(model, &spec, &train, &test, None, |r| writer.write(r))?;
    let mut ckpt = Checkpoint::new();
    ckpt.add_model(&run.student)?;
    ckpt.set_meta("role", "teacher")?;
    seed_meta(&mut ckpt, cfg)?;
    let path = cfg.teacher_checkpoint_path();
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    ckpt.save(&path)?;
    Ok(TeacherReport {
        checkpoint: path,
        test_acc: run.metrics.last().map_or(0.0, |m| m.test_acc),
        metrics: run.metrics,
    })
}

pub fn load_teacher(cfg: &ExperimentConfig) -> Result<Model<f32>> {
    let path = cfg.teacher_checkpoint_path();
    if !path.is_file() {
        return Err(config_err!("teacher checkpoint {} does not exist", path.display()));
    }
    Checkpoint::load(&path)?.model(Mode::Eval)
}

/// Samples teacher features at `level.teacher_tap` and clusters them.
pub fn build_vocabulary(cfg: &ExperimentConfig, teacher: &Model<f32>, train: &Dataset, level: &Level) -> Result<Vocabulary> {
    let tag = level.k as u64 ^ (level.teacher_tap.bytes().fold(0u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64)) << 16);
    let sample_seed = seed::derive(cfg.vocab.seed, tag);
    let feats = collect_features(teacher, train, &level.teacher_tap, level.k, cfg.vocab.max_vectors, sample_seed)?;
    let kc = KMeansConfig {
        max_iters: cfg.vocab.max_iters,
        restarts: cfg.vocab.restarts,
        ..KMeansConfig::new(level.k, seed::derive(sample_seed, 1))
    };
    let fit = kmeans(feats.data(), feats.shape()[1], &kc)?;
    let mut v = Vocabulary::new(
        fit.centroids.iter().map(|&c| c as f32).collect(),
        level.k,
        feats.shape()[1],
        level.teacher_tap.clone(),
        fit.objective,
    )?;
    v.seed = Some(cfg.vocab.seed);
    Ok(v)
}

/// One vocabulary per configured level, written to the output directory.
pub fn cmd_build_vocab(cfg: &ExperimentConfig) -> Result<Vec<(PathBuf, Vocabulary)>> {
    ensure_dir(&cfg.output_dir)?;
    let teacher = load_teacher(cfg)?;
    for l in &cfg.distill.levels {
        teacher
            .arch
            .resolve_tap(&l.teacher_tap)
            .map_err(|e| config_err!("teacher checkpoint has no tap '{}': {e}", l.teacher_tap))?;
    }
    let (train, _) = cfg.datasets()?;
    let mut out = Vec::new();
    for (i, l) in cfg.distill.levels.iter().enumerate() {
        let v = build_vocabulary(cfg, &teacher, &train, l)?;
        let path = cfg.vocab_path(i);
        v.save(&path)?;
        out.push((path, v));
    }
    Ok(out)
}

pub fn load_vocabularies(cfg: &ExperimentConfig) -> Result<Vec<Vocabulary>> {
    cfg.distill
        .levels
        .iter()
        .enumerate()
        .map(|(i, _)| {
            let path = cfg.vocab_path(i);
            if !path.is_file() {
                return Err(config_err!(
                    "quest mode needs vocabulary {} (run build-vocab first)",
                    path.display()
                ));
            }
            Vocabulary::load(&path)
        })
        .collect()
}

pub struct DistillReport {
    pub checkpoint: PathBuf,
    pub final_test_acc: f64,
    pub final_distill_loss: f64,
    pub metrics: Vec<MetricsRecord>,
    pub teacher_checksum: String,
}

/// Distils into a fresh student using an already-loaded teacher cache and
/// vocabularies. Writes `<stem>_metrics.jsonl` and `<stem>.qckp`.
pub fn distill_run(
    cfg: &ExperimentConfig,
    cache: Option<&mut TeacherCache>,
    vocabs: &[Vocabulary],
    data: (&Dataset, &Dataset),
    stem: &str,
) -> Result<(DistillReport, RunResult)> {
    ensure_dir(&cfg.output_dir)?;
    let vocabs = if cfg.distill.mode == DistillMode::Quest { vocabs } else { &[] };
    let teacher_checksum = cache.as_ref().map(|c| c.teacher().checksum()).unwrap_or_default();
    let student = build_model(&cfg.student_arch()?, seed::derive(cfg.seeds.model, STUDENT_INIT))?;
    let tc = cfg.student_train();
    let spec = RunSpec {
        train: &tc,
        distill: &cfg.distill,
        vocabs,
        training_seed: seed::derive(cfg.seeds.training, STUDENT_SHUFFLE),
        heads_seed: seed::derive(cfg.seeds.model, HEADS_INIT),
        record_wall_time: cfg.record_wall_time,
    };
    let metrics_path = cfg.output_dir.join(format!("{stem}_metrics.jsonl"));
    let mut writer = MetricsWriter::create(&metrics_path)?;
    let cache = if cfg.distill.mode == DistillMode::None { None } else { cache };
    let run = run_training(student, &spec, data.0, data.1, cache, |r| writer.write(r))?;

    let mut ckpt = Checkpoint::new();
    ckpt.add_model(&run.student)?;
    ckpt.add_params(HEADS_PREFIX, &run.heads.params)?;
    ckpt.set_meta("role", "student")?;
    ckpt.set_meta("distill.mode", cfg.distill.mode.name())?;
    seed_meta(&mut ckpt, cfg)?;
    let path = cfg.output_dir.join(format!("{stem}.qckp"));
    ckpt.save(&path)?;
    let last = run.metrics.last().expect("at least one epoch");
    Ok((
        DistillReport {
            checkpoint: path,
            final_test_acc: last.test_acc,
            final_distill_loss: last.train_loss.distill,
            metrics: run.metrics.clone(),
            teacher_checksum,
        },
        run,
    ))
}

/// The student model and its distillation heads from a `distill` checkpoint.
pub fn load_student(ckpt: &Checkpoint) -> Result<(Model<f32>, DistillHeads<f32>)> {
    Ok((
        ckpt.model(Mode::Eval)?,
        DistillHeads {
            params: ckpt.params(HEADS_PREFIX)?,
        },
    ))
}

pub fn cmd_distill(cfg: &ExperimentConfig) -> Result<DistillReport> {
    let data = cfg.datasets()?;
    let mode = cfg.distill.mode;
    let vocabs = if mode == DistillMode::Quest {
        load_vocabularies(cfg)?
    } else {
        Vec::new()
    };
    let mut cache = match mode {
        DistillMode::None => None,
        _ => Some(TeacherCache::new(load_teacher(cfg)?, &cfg.distill.teacher_taps())?),
    };
    let stem = format!("student_{}", mode.name());
    Ok(distill_run(cfg, cache.as_mut(), &vocabs, (&data.0, &data.1), &stem)?.0)
}

pub struct EvalReport {
    pub checkpoint: PathBuf,
    pub role: String,
    pub accuracy: f64,
    pub samples: usize,
}

pub fn cmd_eval(cfg: &ExperimentConfig) -> Result<EvalReport> {
    let path = cfg
        .eval_checkpoint
        .clone()
        .unwrap_or_else(|| cfg.student_checkpoint_path());
    let ckpt = Checkpoint::load(&path)?;
    let role = ckpt.meta("role").unwrap_or("student").to_string();
    let expected = if role == "teacher" {
        cfg.teacher_arch()?
    } else {
        cfg.student_arch()?
    };
    let arch = ckpt.arch()?;
    if arch != expected {
        return Err(config_err!("checkpoint holds {arch}, config describes {expected}"));
    }
    let model = ckpt.model(Mode::Eval)?;
    let (train, test) = cfg.datasets()?;
    let data = match cfg.eval_split {
        crate::data::Split::Train => train,
        crate::data::Split::Test => test,
    };
    Ok(EvalReport {
        checkpoint: path,
        role,
        accuracy: evaluate(&model, &data)?,
        samples: data.len(),
    })
}

/// Flattened K·H·W assignment maps, one row per image.
pub struct MapBank {
    pub rows: Vec<Vec<f32>>,
    pub width: usize,
}

/// Teacher maps `p_T` at level 0, after spatial matching with the student tap.
pub fn teacher_maps(
    teacher: &Model<f32>,
    student: &Model<f32>,
    level: &Level,
    vocab: &Vocabulary,
    data: &Dataset,
) -> Result<MapBank> {
    bank(data, |batch| {
        let f_t = teacher.infer(batch, &[&level.teacher_tap])?;
        let f_s = student.infer(batch, &[&level.student_tap])?;
        let (f_t, _, _) = distill::spatial_match(f_t.feature(&level.teacher_tap)?, f_s.feature(&level.student_tap)?)?;
        Ok(quantize_feature_map(&f_t, vocab, level.tau)?.probs)
    })
}

/// Student maps `p_S` from the level-0 predictor.
pub fn student_maps(
    teacher: &Model<f32>,
    student: &Model<f32>,
    heads: &DistillHeads<f32>,
    level: &Level,
    data: &Dataset,
) -> Result<MapBank> {
    let predictor = heads.predictor(0)?;
    bank(data, |batch| {
        let f_t = teacher.infer(batch, &[&level.teacher_tap])?;
        let f_s = student.infer(batch, &[&level.student_tap])?;
        let (_, f_s, _) = distill::spatial_match(f_t.feature(&level.teacher_tap)?, f_s.feature(&level.student_tap)?)?;
        Ok(distill::predictor_forward(&f_s, &predictor)?.0.probs)
    })
}

fn bank(data: &Dataset, mut f: impl FnMut(&crate::Tensor<f32>) -> Result<crate::Tensor<f32>>) -> Result<MapBank> {
    if data.is_empty() {
        return Err(Error::Usage("retrieval needs a non-empty dataset".into()));
    }
    let all: Vec<usize> = (0..data.len()).collect();
    let mut rows = Vec::with_capacity(data.len());
    let mut width = 0;
    for chunk in all.chunks(128) {
        let maps = f(&data.batch(chunk, &[])?)?;
        width = maps.len() / chunk.len();
        for j in 0..chunk.len() {
            rows.push(maps.sample(j).to_vec());
        }
    }
    Ok(MapBank { rows, width })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalRow {
    pub query: usize,
    /// 1-based rank of the query image itself in the database ordering.
    pub self_rank: usize,
    pub top: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalReport {
    pub rows: Vec<RetrievalRow>,
    pub rank1_fraction: f64,
    pub mean_self_rank: f64,
}

/// Ranks the database by dot product with each query row. Query `q` is the
/// database entry with the same index; ties keep the lower index first.
pub fn rank_queries(queries: &MapBank, database: &MapBank, ids: &[usize], top_k: usize) -> Result<RetrievalReport> {
    if queries.width != database.width {
        return Err(config_err!(
            "query maps have {} entries, database maps {}",
            queries.width,
            database.width
        ));
    }
    let mut rows = Vec::with_capacity(ids.len());
    for &q in ids {
        let qrow = &queries.rows[q];
        let scores: Vec<f64> = database
            .rows
            .iter()
            .map(|r| r.iter().zip(qrow).map(|(&a, &b)| a as f64 * b as f64).sum())
            .collect();
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let self_rank = order.iter().position(|&i| i == q).expect("query is in the database") + 1;
        order.truncate(top_k);
        rows.push(RetrievalRow {
            query: q,
            self_rank,
            top: order,
        });
    }
    let n = rows.len().max(1) as f64;
    Ok(RetrievalReport {
        rank1_fraction: rows.iter().filter(|r| r.self_rank == 1).count() as f64 / n,
        mean_self_rank: rows.iter().map(|r| r.self_rank as f64).sum::<f64>() / n,
        rows,
    })
}

/// Retrieval with teacher-map queries against a student-map database.
pub fn retrieve(
    cfg: &ExperimentConfig,
    teacher: &Model<f32>,
    student: &Model<f32>,
    heads: &DistillHeads<f32>,
    vocab: &Vocabulary,
    data: &Dataset,
) -> Result<RetrievalReport> {
    let level = cfg
        .distill
        .levels
        .first()
        .ok_or_else(|| config_err!("retrieval needs a distillation level"))?;
    let queries = teacher_maps(teacher, student, level, vocab, data)?;
    let database = student_maps(teacher, student, heads, level, data)?;
    let n = cfg.retrieve.num_queries.min(data.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seeds.data, RETRIEVE_QUERIES));
    let mut ids = index::sample(&mut rng, data.len(), n).into_vec();
    ids.sort_unstable();
    rank_queries(&queries, &database, &ids, cfg.retrieve.top_k)
}

pub fn cmd_retrieve(cfg: &ExperimentConfig) -> Result<RetrievalReport> {
    let teacher = load_teacher(cfg)?;
    let path = cfg.output_dir.join("student_quest.qckp");
    let ckpt = Checkpoint::load(&path)?;
    let (student, heads) = load_student(&ckpt)?;
    let vocab = Vocabulary::load(&cfg.vocab_path(0))?;
    let (train, test) = cfg.datasets()?;
    let data = match cfg.retrieve.split {
        crate::data::Split::Train => train,
        crate::data::Split::Test => test,
    };
    let report = retrieve(cfg, &teacher, &student, &heads, &vocab, &data)?;
    let mut out = BufWriter::new(File::create(cfg.output_dir.join("retrieval.tsv"))?);
    writeln!(out, "query\tself_rank\ttop")?;
    for r in &report.rows {
        let top: Vec<String> = r.top.iter().map(usize::to_string).collect();
        writeln!(out, "{}\t{}\t{}", r.query, r.self_rank, top.join(","))?;
    }
    out.flush()?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub setting: String,
    pub final_test_acc: f64,
    pub final_distill_loss: f64,
}

/// Runs one quest distillation per sweep value with shared seeds and writes
/// `ablate_<sweep>.csv`.
pub fn cmd_ablate(cfg: &ExperimentConfig) -> Result<(PathBuf, Vec<AblationRow>)> {
    let sweep = cfg
        .ablate
        .as_ref()
        .ok_or_else(|| config_err!("ablate needs an [ablate] sweep"))?;
    let base = cfg
        .distill
        .levels
        .first()
        .cloned()
        .ok_or_else(|| config_err!("ablate needs a base distillation level"))?;
    let (kind, settings): (&str, Vec<(String, Level)>) = match sweep {
        Sweep::Tau(v) => ("tau", v.iter().map(|&tau| (format!("tau={tau}"), Level { tau, ..base.clone() })).collect()),
        Sweep::K(v) => ("k", v.iter().map(|&k| (format!("k={k}"), Level { k, ..base.clone() })).collect()),
        Sweep::Tap(v) => (
            "tap",
            v.iter()
                .map(|(t, s)| {
                    (
                        format!("tap={t}:{s}"),
                        Level {
                            teacher_tap: t.clone(),
                            student_tap: s.clone(),
                            ..base.clone()
                        },
                    )
                })
                .collect(),
        ),
    };
    if settings.is_empty() {
        return Err(config_err!("ablation sweep is empty"));
    }
    ensure_dir(&cfg.output_dir)?;
    let teacher = load_teacher(cfg)?;
    let taps: Vec<&str> = settings.iter().map(|(_, l)| l.teacher_tap.as_str()).collect();
    let mut cache = TeacherCache::new(teacher.clone(), &taps)?;
    let (train, test) = cfg.datasets()?;
    let mut vocab_memo: Vec<((String, usize), Vocabulary)> = Vec::new();
    let mut rows = Vec::new();
    for (i, (label, level)) in settings.iter().enumerate() {
        let key = (level.teacher_tap.clone(), level.k);
        let vocab = match vocab_memo.iter().find(|(k, _)| *k == key) {
            Some((_, v)) => v.clone(),
            None => {
                let v = build_vocabulary(cfg, &teacher, &train, level)?;
                vocab_memo.push((key, v.clone()));
                v
            }
        };
        let mut run_cfg = cfg.clone();
        run_cfg.distill = DistillConfig {
            mode: DistillMode::Quest,
            levels: vec![level.clone()],
            ..cfg.distill.clone()
        };
        let (report, _) = distill_run(&run_cfg, Some(&mut cache), &[vocab], (&train, &test), &format!("ablate_{kind}_{i}"))?;
        rows.push(AblationRow {
            setting: label.clone(),
            final_test_acc: report.final_test_acc,
            final_distill_loss: report.final_distill_loss,
        });
    }
    let path = cfg.output_dir.join(format!("ablate_{kind}.csv"));
    let mut w = csv::Writer::from_path(&path).map_err(|e| config_err!("cannot write {}: {e}", path.display()))?;
    let csv_err = |e: csv::Error| config_err!("writing ablation table: {e}");
    w.write_record(["setting", "final_test_acc", "final_distill_loss"]).map_err(csv_err)?;
    for r in &rows {
        w.write_record([r.setting.clone(), r.final_test_acc.to_string(), r.final_distill_loss.to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok((path, rows))
}

pub fn cmd_gradcheck(corrupt: Option<&str>) -> Result<SuiteReport> {
    gradcheck::run_suite(corrupt)
}
