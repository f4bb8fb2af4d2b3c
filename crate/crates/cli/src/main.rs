use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use morec_cli::pipeline::{run_stage, Stage};
use morec_cli::Overrides;

/// Multi-objective recommender experiments.
#[derive(Parser, Debug)]
#[command(name = "morec", version)]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true, default_value = "morec.toml")]
    config: PathBuf,
    /// Override the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for sweep entries and evaluation.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic dataset as TSV.
    Synth,
    /// Load, k-core filter and split the data.
    Prep,
    /// Pretrain the base model (cached).
    Pretrain,
    /// Continual training for sweep entries.
    Train {
        /// Only these sweep labels (default: all).
        #[arg(long = "entry")]
        entries: Vec<String>,
    },
    /// Test-split metrics for the base and trained entries.
    Eval {
        #[arg(long = "entry")]
        entries: Vec<String>,
    },
    /// Aggregate evaluations into the report bundle.
    Report,
    /// prep, pretrain, train, eval and report in one go.
    Run,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MOREC_LOG", "info")).init();
    let cli = Cli::parse();
    if cli.jobs == Some(0) {
        log::error!("--jobs must be >= 1");
        return ExitCode::from(morec_cli::EXIT_CONFIG as u8);
    }
    let overrides = Overrides {
        seed: cli.seed,
        out_dir: cli.out,
        jobs: cli.jobs,
    };
    let (stage, only) = match cli.command {
        Command::Synth => (Stage::Synth, vec![]),
        Command::Prep => (Stage::Prep, vec![]),
        Command::Pretrain => (Stage::Pretrain, vec![]),
        Command::Train { entries } => (Stage::Train, entries),
        Command::Eval { entries } => (Stage::Eval, entries),
        Command::Report => (Stage::Report, vec![]),
        Command::Run => (Stage::Run, vec![]),
    };
    match run_stage(stage, &cli.config, &overrides, &only) {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
