use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

/// Synthetic generation, training, evaluation, ablation and sweeps for the
/// dual-pathway streaming phase classifier.
#[derive(Parser)]
#[command(name = "dsted", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// JSON run configuration; omitted keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// `key.path=value` override, repeatable.
    #[arg(long = "set", value_name = "K=V")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (CSV per sequence plus manifest).
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train on the training split and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory; generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and write metrics and per-frame predictions.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory; generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Evaluate every sequence instead of the test split.
        #[arg(long)]
        all: bool,
    },
    /// Train and evaluate the five variants over the ablation seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Dataset directory; generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Threshold and top-k sweeps of the full model.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Dataset directory; generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use dsted_core::Error;
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Diverged { .. } | Error::NonFinite(_)) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth { common } => commands::synth(&common),
        Command::Train { common, data } => commands::train(&common, data.as_deref()),
        Command::Eval { common, checkpoint, data, all } => commands::eval(&common, &checkpoint, data.as_deref(), all),
        Command::Ablate { common, data } => commands::ablate(&common, data.as_deref()),
        Command::Sweep { common, data } => commands::sweep(&common, data.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
