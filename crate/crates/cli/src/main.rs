//! `wd`: train a teacher transformer, distill students from it by weight
//! generation or classic distillation, and evaluate, ablate, sweep, and
//! benchmark the results.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use commands::Method;
use config::ExperimentConfig;

#[derive(Parser)]
#[command(
    name = "wd",
    about = "Weight-distillation experiment driver",
    version
)]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config's seed list with a single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the experiment output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the teacher and save its checkpoint, curve, and report.
    TrainTeacher,
    /// Train a student by the given method from the stored teacher.
    Distill {
        #[arg(long, value_enum)]
        method: Method,
    },
    /// Per-weight-class generation table (no distillation loss term).
    Ablate,
    /// Grid over learning rate x warmup or student depth x width.
    Sweep,
    /// Decoding throughput of stored checkpoints.
    Bench {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Accuracy/BLEU report for one checkpoint on the validation set.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };

    let config_path = match &cli.config {
        Some(p) => p.clone(),
        None => {
            eprintln!("error: --config <path> is required");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let mut cfg = match ExperimentConfig::load(&config_path) {
        Ok(cfg) => cfg,
        Err(err) => {
            eprintln!("error: {err:#}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    if let Some(out) = cli.out {
        cfg.experiment.out_dir = out;
    }
    if let Some(seed) = cli.seed {
        cfg.experiment.seeds = vec![seed];
    }

    let result = match cli.command {
        Command::TrainTeacher => commands::cmd_train_teacher(&cfg, cli.seed),
        Command::Distill { method } => commands::cmd_distill(&cfg, method, cli.seed),
        Command::Ablate => commands::cmd_ablate(&cfg),
        Command::Sweep => commands::cmd_sweep(&cfg),
        Command::Bench { checkpoint } => commands::cmd_bench(&cfg, checkpoint),
        Command::Eval { checkpoint } => commands::cmd_eval(&cfg, checkpoint),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
