//! Experiment runner for the deep-BSDE solver: trains value networks on
//! simulated paths and writes the standard evaluation artifacts as CSV.
//!
//! Exit codes: 0 success, 1 I/O or internal failure, 2 configuration error,
//! 3 checkpoint error, 4 numerical divergence.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bsde::cli::{self, CliError, RunConfig};

#[derive(Parser)]
#[command(name = "bsde", version, about = "Deep-BSDE solver experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network; writes loss_curve.csv and checkpoint.json.
    Train(Common),
    /// Evaluate a checkpoint on fresh paths; writes error_curve.csv and
    /// sample_paths.csv.
    Evaluate(WithCheckpoint),
    /// Evaluate a checkpoint at perturbed start points; writes
    /// generalization.csv.
    Generalize(GeneralizeArgs),
    /// Run the Euler strong-convergence study; writes convergence.csv.
    Convergence(Common),
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the output directory from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the worker thread count from the config.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct WithCheckpoint {
    #[command(flatten)]
    common: Common,
    /// Trained network to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct GeneralizeArgs {
    #[command(flatten)]
    with_checkpoint: WithCheckpoint,
    /// Comma-separated relative distances in [0, 1].
    #[arg(long, default_value = "0,0.05,0.1,0.15,0.2")]
    distances: String,
}

fn load(common: &Common) -> Result<RunConfig, CliError> {
    let mut config = cli::load_config(&common.config)?;
    cli::apply_overrides(&mut config, common.out.as_deref(), common.threads);
    Ok(config)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(common) => cli::cmd_train(&load(&common)?),
        Command::Evaluate(args) => {
            let config = load(&args.common)?;
            cli::cmd_evaluate(&config, Path::new(&args.checkpoint))
        }
        Command::Generalize(args) => {
            let config = load(&args.with_checkpoint.common)?;
            let distances = cli::parse_distances(&args.distances)?;
            cli::cmd_generalize(&config, Path::new(&args.with_checkpoint.checkpoint), &distances)
        }
        Command::Convergence(common) => cli::cmd_convergence(&load(&common)?),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
