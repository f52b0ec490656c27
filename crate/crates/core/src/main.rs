use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use quest_core::harness::commands;
use quest_core::harness::ExperimentConfig;
use quest_core::Result;

#[derive(Parser)]
#[command(name = "quest", version, about = "Visual-word distillation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory, overriding `[output] dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the model and training seeds.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Supervised training of the teacher.
    TrainTeacher(Common),
    /// Cluster teacher features into one vocabulary per level.
    BuildVocab(Common),
    /// Train a student under the configured distillation mode.
    Distill(Common),
    /// Top-1 accuracy of a checkpoint.
    Eval(Common),
    /// Retrieve images by their teacher word maps from student word maps.
    Retrieve(Common),
    /// Sweep one distillation setting.
    Ablate(Common),
    /// Finite-difference check of every differentiable op.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.override_seed(seed);
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::TrainTeacher(c) => {
            let r = commands::cmd_train_teacher(&load(&c)?)?;
            println!("teacher test accuracy {:.4}", r.test_acc);
            println!("checkpoint {}", r.checkpoint.display());
        }
        Command::BuildVocab(c) => {
            for (path, v) in commands::cmd_build_vocab(&load(&c)?)? {
                println!(
                    "{}: tap {} K={} C={} objective {:.6e}",
                    path.display(),
                    v.tap,
                    v.k(),
                    v.dim(),
                    v.kmeans_objective
                );
            }
        }
        Command::Distill(c) => {
            let r = commands::cmd_distill(&load(&c)?)?;
            println!("final test accuracy {:.4}", r.final_test_acc);
            println!("final distill loss {:.6}", r.final_distill_loss);
            println!("checkpoint {}", r.checkpoint.display());
        }
        Command::Eval(c) => {
            let r = commands::cmd_eval(&load(&c)?)?;
            println!(
                "{} ({}) accuracy {:.4} on {} samples",
                r.checkpoint.display(),
                r.role,
                r.accuracy,
                r.samples
            );
        }
        Command::Retrieve(c) => {
            let r = commands::cmd_retrieve(&load(&c)?)?;
            println!("queries {}", r.rows.len());
            println!("rank-1 self retrieval {:.4}", r.rank1_fraction);
            println!("mean self rank {:.3}", r.mean_self_rank);
        }
        Command::Ablate(c) => {
            let (path, rows) = commands::cmd_ablate(&load(&c)?)?;
            for r in rows {
                println!("{}\t{:.4}\t{:.6}", r.setting, r.final_test_acc, r.final_distill_loss);
            }
            println!("table {}", path.display());
        }
        Command::Gradcheck { corrupt, .. } => {
            let report = commands::cmd_gradcheck(corrupt.as_deref())?;
            for op in &report.ops {
                let status = if op.passed() { "ok" } else { "FAIL" };
                println!("{:<42} {:>10.3e}  {}", op.op, op.worst, status);
            }
            if !report.passed() {
                eprintln!("gradient check failed for {}", report.failing().join(", "));
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
