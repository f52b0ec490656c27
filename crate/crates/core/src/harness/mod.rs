//! Experiment orchestration: configuration, the training loop, metrics and
//! the command implementations behind the `quest` binary.

pub mod config;
pub mod train;
pub mod commands;

pub use config::{DataConfig, DataSource, ExperimentConfig, NetworkConfig, RetrieveConfig, Seeds, Sweep, VocabConfig};
pub use train::{evaluate, run_training, teacher_peakiness, LossTerms, MetricsRecord, RunResult, RunSpec, TeacherCache, TrainConfig};
