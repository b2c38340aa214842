//! `dccl`: data generation, training, evaluation and experiment grids.

mod commands;
mod config;
mod error;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dccl_core::train::Method;

use crate::commands::ProbeSplits;
use crate::config::{Overrides, Preset, RunConfig};
use crate::error::CliError;
use crate::run::RunDir;

#[derive(Parser)]
#[command(name = "dccl", version, about = "Domain-confused contrastive learning laboratory")]
struct Cli {
    /// TOML run configuration; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory. Defaults to <out-root>/<command>-<config hash>.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Parent of generated run directories.
    #[arg(long, global = true, env = "DCCL_OUT_ROOT", default_value = "runs")]
    out_root: PathBuf,
    /// Replace the seed list (and the training seed) with this one.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Replace the method list (and the training method) with this one.
    #[arg(long, global = true)]
    method: Option<Method>,
    /// Hyperparameter preset applied under the config file.
    #[arg(long, global = true)]
    preset: Option<Preset>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the paired source/target corpus splits.
    GenerateData,
    /// Train one (method, seed) cell.
    Train {
        /// Corpus directory written by generate-data; generated from the config otherwise.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Accuracy of a checkpoint on the labeled evaluation splits.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Also dump encoder outputs of both test splits.
        #[arg(long)]
        embeddings: bool,
    },
    /// Proxy A-distance between the two domains' encoder outputs.
    ADistance {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        splits: ProbeSplits,
    },
    /// Frequency-ratio table and masked fractions.
    MaskStats {
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Every method x seed, then paired comparisons against source_only.
    Matrix {
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenerateData => "generate-data",
            Command::Train { .. } => "train",
            Command::Evaluate { .. } => "evaluate",
            Command::ADistance { .. } => "a-distance",
            Command::MaskStats { .. } => "mask-stats",
            Command::Matrix { .. } => "matrix",
        }
    }
}

fn run(cli: Cli) -> Result<PathBuf, CliError> {
    let overrides = Overrides {
        preset: cli.preset,
        seed: cli.seed,
        method: cli.method,
    };
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    let name = cli.command.name();
    let root = cli
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| cli.out_root.join(format!("{name}-{}", &cfg.hash()[..12])));
    let dir = RunDir::create(root)?;
    match &cli.command {
        Command::GenerateData => commands::generate_data(&cfg, &dir)?,
        Command::Train { corpus } => commands::train_one(&cfg, &dir, corpus.as_deref())?,
        Command::Evaluate {
            checkpoint,
            corpus,
            embeddings,
        } => commands::evaluate(&cfg, &dir, checkpoint, corpus.as_deref(), *embeddings)?,
        Command::ADistance {
            checkpoint,
            corpus,
            splits,
        } => commands::a_distance_cmd(&cfg, &dir, checkpoint, corpus.as_deref(), *splits)?,
        Command::MaskStats { corpus } => commands::mask_stats(&cfg, &dir, corpus.as_deref())?,
        Command::Matrix { corpus } => commands::matrix(&cfg, &dir, corpus.as_deref())?,
    }
    Ok(dir.root().to_path_buf())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
