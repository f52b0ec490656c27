//! INI experiment configuration. Every section and key is known in advance;
//! anything else is rejected.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::Ini;

use super::train::TrainConfig;
use crate::data::{synth_generate, Augment, Dataset, Normalization, Split, SynthConfig};
use crate::distill::{DistillConfig, DistillMode, Level};
use crate::error::{config_err, Result};
use crate::models::{ArchSpec, Stage};

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic {
        num_classes: usize,
        n_train: usize,
        n_test: usize,
        size: usize,
        noise: f32,
        distractor: f32,
    },
    Cifar {
        train_path: PathBuf,
        test_path: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub normalization: Normalization,
    pub augment: Augment,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub stages: Vec<Stage>,
    pub epochs: usize,
    pub lr_schedule: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    pub data: u64,
    pub model: u64,
    pub training: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VocabConfig {
    pub max_vectors: usize,
    pub max_iters: usize,
    pub restarts: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrieveConfig {
    pub num_queries: usize,
    pub top_k: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Sweep {
    Tau(Vec<f64>),
    K(Vec<usize>),
    /// `(teacher tap, student tap)` per setting.
    Tap(Vec<(String, String)>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub teacher: NetworkConfig,
    pub student: NetworkConfig,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub distill: DistillConfig,
    pub vocab: VocabConfig,
    pub seeds: Seeds,
    pub output_dir: PathBuf,
    pub record_wall_time: bool,
    pub teacher_checkpoint: Option<PathBuf>,
    pub eval_checkpoint: Option<PathBuf>,
    pub eval_split: Split,
    pub retrieve: RetrieveConfig,
    pub ablate: Option<Sweep>,
}

const SCHEMA: &[(&str, &[&str])] = &[
    (
        "data",
        &[
            "source",
            "num_classes",
            "n_train",
            "n_test",
            "size",
            "noise",
            "distractor",
            "train_path",
            "test_path",
            "normalization",
            "augment",
        ],
    ),
    ("teacher", &["stages", "epochs", "lr_schedule", "checkpoint"]),
    ("student", &["stages", "epochs", "lr_schedule"]),
    ("train", &["batch_size", "momentum", "weight_decay"]),
    ("distill", &["mode", "alpha", "beta", "rho", "levels", "tau", "k"]),
    ("vocab", &["max_vectors", "max_iters", "restarts", "seed"]),
    ("seeds", &["data", "model", "training"]),
    ("output", &["dir", "record_wall_time"]),
    ("eval", &["checkpoint", "split"]),
    ("retrieve", &["num_queries", "top_k", "split"]),
    ("ablate", &["sweep", "values"]),
];

struct Sections<'a> {
    ini: &'a Ini,
}

impl Sections<'_> {
    fn raw(&self, section: &str, key: &str) -> Option<&str> {
        self.ini.get_from(Some(section), key).map(str::trim)
    }

    fn get<T: FromStr>(&self, section: &str, key: &str, default: T) -> Result<T> {
        match self.raw(section, key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| config_err!("[{section}] {key} = '{v}' is not valid")),
        }
    }

    fn list<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<Vec<T>>> {
        self.raw(section, key)
            .map(|v| {
                v.split(',')
                    .map(|x| {
                        x.trim()
                            .parse()
                            .map_err(|_| config_err!("[{section}] {key}: '{x}' is not valid"))
                    })
                    .collect()
            })
            .transpose()
    }
}

/// `"0:0.05, 40:0.005"` → `[(0, 0.05), (40, 0.005)]`.
pub fn parse_lr_schedule(s: &str) -> Result<Vec<(usize, f64)>> {
    s.split(',')
        .map(|part| {
            let (e, lr) = part
                .trim()
                .split_once(':')
                .ok_or_else(|| config_err!("lr schedule entry '{part}' must be epoch:lr"))?;
            Ok((
                e.trim().parse().map_err(|_| config_err!("bad epoch in '{part}'"))?,
                lr.trim().parse().map_err(|_| config_err!("bad learning rate in '{part}'"))?,
            ))
        })
        .collect()
}

/// `"last_conv:last_conv, stage2:stage2"` → tap pairs.
pub fn parse_tap_pairs(s: &str) -> Result<Vec<(String, String)>> {
    s.split(',')
        .map(|part| {
            let (t, st) = part
                .trim()
                .split_once(':')
                .ok_or_else(|| config_err!("tap pair '{part}' must be teacher_tap:student_tap"))?;
            Ok((t.trim().to_string(), st.trim().to_string()))
        })
        .collect()
}

fn parse_normalization(s: &str) -> Result<Normalization> {
    match s {
        "identity" | "none" => Ok(Normalization::IDENTITY),
        "cifar10" => Ok(Normalization::CIFAR10),
        "synthetic" => Ok(Normalization::SYNTHETIC),
        other => {
            let vals: Vec<f32> = other
                .split(',')
                .map(|v| v.trim().parse().map_err(|_| config_err!("bad normalization '{other}'")))
                .collect::<Result<_>>()?;
            if vals.len() != 6 || vals[3..].iter().any(|&s| !(s > 0.0)) {
                return Err(config_err!(
                    "normalization must be identity, cifar10, synthetic or six numbers mean_r,mean_g,mean_b,std_r,std_g,std_b"
                ));
            }
            Ok(Normalization {
                mean: [vals[0], vals[1], vals[2]],
                std: [vals[3], vals[4], vals[5]],
            })
        }
    }
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => Err(config_err!("split must be train or test, got '{other}'")),
    }
}

/// Expands a one-element list to `n` copies; otherwise the length must be `n`.
fn per_level<T: Clone>(v: Vec<T>, n: usize, what: &str) -> Result<Vec<T>> {
    match v.len() {
        1 => Ok(vec![v[0].clone(); n]),
        len if len == n => Ok(v),
        len => Err(config_err!("{what} has {len} values for {n} levels")),
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    /// Parses config text; relative paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let ini = Ini::load_from_str_noescape(text).map_err(|e| config_err!("config syntax: {e}"))?;
        let mut seen = BTreeSet::new();
        for (section, props) in ini.iter() {
            let Some(name) = section else {
                if let Some((k, _)) = props.iter().next() {
                    return Err(config_err!("key '{k}' appears before any [section]"));
                }
                continue;
            };
            let (_, keys) = SCHEMA
                .iter()
                .find(|(s, _)| *s == name)
                .ok_or_else(|| config_err!("unknown section [{name}]"))?;
            if !seen.insert(name.to_string()) {
                return Err(config_err!("section [{name}] appears twice"));
            }
            let mut keys_seen = BTreeSet::new();
            for (k, _) in props.iter() {
                if !keys.contains(&k) {
                    return Err(config_err!("unknown key '{k}' in [{name}]"));
                }
                if !keys_seen.insert(k) {
                    return Err(config_err!("key '{k}' repeated in [{name}]"));
                }
            }
        }
        let s = Sections { ini: &ini };
        let resolve = |p: &str| -> PathBuf {
            let p = Path::new(p);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };

        let source = match s.raw("data", "source").unwrap_or("synthetic") {
            "synthetic" => DataSource::Synthetic {
                num_classes: s.get("data", "num_classes", 8)?,
                n_train: s.get("data", "n_train", 8000)?,
                n_test: s.get("data", "n_test", 2000)?,
                size: s.get("data", "size", 32)?,
                noise: s.get("data", "noise", SynthConfig::new(0, 2, 0, 0, 4).noise)?,
                distractor: s.get("data", "distractor", SynthConfig::new(0, 2, 0, 0, 4).distractor)?,
            },
            "cifar" => {
                let path = |key: &str| -> Result<PathBuf> {
                    let p = resolve(
                        s.raw("data", key)
                            .ok_or_else(|| config_err!("[data] source = cifar needs {key}"))?,
                    );
                    if !p.is_file() {
                        return Err(config_err!("[data] {key} {} does not exist", p.display()));
                    }
                    Ok(p)
                };
                DataSource::Cifar {
                    train_path: path("train_path")?,
                    test_path: path("test_path")?,
                }
            }
            other => return Err(config_err!("[data] source must be synthetic or cifar, got '{other}'")),
        };
        let default_norm = match source {
            DataSource::Synthetic { .. } => "synthetic",
            DataSource::Cifar { .. } => "cifar10",
        };
        let data = DataConfig {
            source,
            normalization: parse_normalization(s.raw("data", "normalization").unwrap_or(default_norm))?,
            augment: Augment::parse(s.raw("data", "augment").unwrap_or("flip"))?,
        };

        let defaults = TrainConfig::default();
        let network = |section: &str, stages: &str| -> Result<NetworkConfig> {
            Ok(NetworkConfig {
                stages: ArchSpec::parse_stages(s.raw(section, "stages").unwrap_or(stages))?,
                epochs: s.get(section, "epochs", defaults.epochs)?,
                lr_schedule: match s.raw(section, "lr_schedule") {
                    Some(v) => parse_lr_schedule(v)?,
                    None => defaults.lr_schedule.clone(),
                },
            })
        };
        let teacher = network("teacher", "32x2,64x2,128x2")?;
        let student = network("student", "16x1,32x1,64x1")?;

        let pairs = parse_tap_pairs(s.raw("distill", "levels").unwrap_or("last_conv:last_conv"))?;
        let n = pairs.len();
        let taus = per_level(s.list("distill", "tau")?.unwrap_or(vec![0.2]), n, "[distill] tau")?;
        let ks = per_level(s.list("distill", "k")?.unwrap_or(vec![64usize]), n, "[distill] k")?;
        let levels = pairs
            .into_iter()
            .zip(taus)
            .zip(ks)
            .map(|(((teacher_tap, student_tap), tau), k)| Level {
                teacher_tap,
                student_tap,
                k,
                tau,
            })
            .collect();
        let distill = DistillConfig {
            alpha: s.get("distill", "alpha", 1.0)?,
            beta: s.get("distill", "beta", 1.0)?,
            rho: s.get("distill", "rho", 4.0)?,
            mode: DistillMode::parse(s.raw("distill", "mode").unwrap_or("quest"))?,
            levels,
        };
        distill.validate()?;

        let seeds = Seeds {
            data: s.get("seeds", "data", 1)?,
            model: s.get("seeds", "model", 1)?,
            training: s.get("seeds", "training", 1)?,
        };
        let vocab = VocabConfig {
            max_vectors: s.get("vocab", "max_vectors", 20_000)?,
            max_iters: s.get("vocab", "max_iters", 50)?,
            restarts: s.get("vocab", "restarts", 3)?,
            seed: s.get("vocab", "seed", seeds.model)?,
        };
        if vocab.restarts == 0 || vocab.max_iters == 0 {
            return Err(config_err!("[vocab] restarts and max_iters must be ≥ 1"));
        }

        let ablate = match s.raw("ablate", "sweep") {
            None => {
                if s.raw("ablate", "values").is_some() {
                    return Err(config_err!("[ablate] values given without sweep"));
                }
                None
            }
            Some(kind) => {
                let values = s.raw("ablate", "values").unwrap_or("");
                if values.is_empty() {
                    return Err(config_err!("[ablate] sweep needs at least one value"));
                }
                Some(match kind {
                    "tau" => Sweep::Tau(s.list("ablate", "values")?.unwrap_or_default()),
                    "k" => Sweep::K(s.list("ablate", "values")?.unwrap_or_default()),
                    "tap" => Sweep::Tap(parse_tap_pairs(values)?),
                    other => return Err(config_err!("[ablate] sweep must be tau, k or tap, got '{other}'")),
                })
            }
        };

        let config = Self {
            data,
            teacher,
            student,
            batch_size: s.get("train", "batch_size", defaults.batch_size)?,
            momentum: s.get("train", "momentum", defaults.momentum)?,
            weight_decay: s.get("train", "weight_decay", defaults.weight_decay)?,
            distill,
            vocab,
            seeds,
            output_dir: resolve(s.raw("output", "dir").unwrap_or("runs")),
            record_wall_time: s.get("output", "record_wall_time", false)?,
            teacher_checkpoint: s.raw("teacher", "checkpoint").map(resolve),
            eval_checkpoint: s.raw("eval", "checkpoint").map(resolve),
            eval_split: parse_split(s.raw("eval", "split").unwrap_or("test"))?,
            retrieve: RetrieveConfig {
                num_queries: s.get("retrieve", "num_queries", 100)?,
                top_k: s.get("retrieve", "top_k", 5)?,
                split: parse_split(s.raw("retrieve", "split").unwrap_or("test"))?,
            },
            ablate,
        };
        config.teacher_train().validate()?;
        config.student_train().validate()?;
        config.teacher_arch()?;
        config.student_arch()?;
        Ok(config)
    }

    fn train_config(&self, net: &NetworkConfig) -> TrainConfig {
        TrainConfig {
            epochs: net.epochs,
            batch_size: self.batch_size,
            lr_schedule: net.lr_schedule.clone(),
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            augment: self.data.augment,
        }
    }

    pub fn teacher_train(&self) -> TrainConfig {
        self.train_config(&self.teacher)
    }

    pub fn student_train(&self) -> TrainConfig {
        self.train_config(&self.student)
    }

    pub fn num_classes(&self) -> usize {
        match self.data.source {
            DataSource::Synthetic { num_classes, .. } => num_classes,
            DataSource::Cifar { .. } => 10,
        }
    }

    pub fn teacher_arch(&self) -> Result<ArchSpec> {
        ArchSpec::new(3, self.teacher.stages.clone(), self.num_classes())
    }

    pub fn student_arch(&self) -> Result<ArchSpec> {
        ArchSpec::new(3, self.student.stages.clone(), self.num_classes())
    }

    /// Applies a `--seed` override to the model and training seeds.
    pub fn override_seed(&mut self, seed: u64) {
        self.seeds.model = seed;
        self.seeds.training = seed;
    }

    /// Loads or generates the `(train, test)` datasets.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        match &self.data.source {
            DataSource::Synthetic {
                num_classes,
                n_train,
                n_test,
                size,
                noise,
                distractor,
            } => {
                let cfg = SynthConfig {
                    noise: *noise,
                    distractor: *distractor,
                    ..SynthConfig::new(self.seeds.data, *num_classes, *n_train, *n_test, *size)
                };
                let (mut train, mut test) = synth_generate(&cfg)?;
                if self.data.normalization != Normalization::IDENTITY {
                    train.normalize(&self.data.normalization);
                    test.normalize(&self.data.normalization);
                }
                Ok((train, test))
            }
            DataSource::Cifar { train_path, test_path } => Ok((
                crate::data::load_cifar_binary(train_path, &self.data.normalization, Split::Train)?,
                crate::data::load_cifar_binary(test_path, &self.data.normalization, Split::Test)?,
            )),
        }
    }

    pub fn teacher_checkpoint_path(&self) -> PathBuf {
        self.teacher_checkpoint
            .clone()
            .unwrap_or_else(|| self.output_dir.join("teacher.qckp"))
    }

    pub fn vocab_path(&self, level: usize) -> PathBuf {
        self.output_dir.join(format!("vocab_level{level}.qvwv"))
    }

    pub fn student_checkpoint_path(&self) -> PathBuf {
        self.output_dir.join(format!("student_{}.qckp", self.distill.mode.name()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ExperimentConfig> {
        ExperimentConfig::parse(text, Path::new("/tmp"))
    }

    #[test]
    fn empty_config_takes_defaults() {
        let c = parse("").unwrap();
        assert_eq!(c.teacher.stages.len(), 3);
        assert_eq!(c.distill.mode, DistillMode::Quest);
        assert_eq!(c.distill.levels[0].k, 64);
        assert_eq!(c.student_train().lr_at(45), 0.005);
        assert_eq!(c.output_dir, Path::new("/tmp/runs"));
    }

    #[test]
    fn unknown_keys_and_sections_are_rejected() {
        assert!(matches!(parse("[data]\nnoize = 0.1\n"), Err(crate::Error::Config(_))));
        assert!(parse("[dataa]\n").is_err());
        assert!(parse("stray = 1\n").is_err());
        assert!(parse("[train]\nbatch_size = 3\nbatch_size = 4\n").is_err());
    }

    #[test]
    fn levels_and_per_level_values() {
        let c = parse("[distill]\nlevels = last_conv:last_conv, stage2:stage2\ntau = 0.1, 0.3\nk = 16\n").unwrap();
        assert_eq!(c.distill.levels.len(), 2);
        assert_eq!(c.distill.levels[1].tau, 0.3);
        assert_eq!(c.distill.levels[1].k, 16);
        assert!(parse("[distill]\nlevels = a:b\ntau = 0.1, 0.2\n").is_err());
    }

    #[test]
    fn ablation_sweeps() {
        let c = parse("[ablate]\nsweep = tau\nvalues = 0, 0.005, 0.2, 1.0\n").unwrap();
        assert_eq!(c.ablate, Some(Sweep::Tau(vec![0.0, 0.005, 0.2, 1.0])));
        assert!(parse("[ablate]\nsweep = tau\nvalues =\n").is_err());
        let c = parse("[ablate]\nsweep = tap\nvalues = last_conv:last_conv, stage2:stage2\n").unwrap();
        assert!(matches!(c.ablate, Some(Sweep::Tap(v)) if v.len() == 2));
    }

    #[test]
    fn missing_cifar_file_is_an_error() {
        assert!(parse("[data]\nsource = cifar\ntrain_path = nope.bin\ntest_path = nope.bin\n").is_err());
    }
}
