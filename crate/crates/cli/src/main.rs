use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sivi_cli::{cmd_diagnose_variance, cmd_evaluate, cmd_sgld, cmd_train, CliError, RunConfig};

#[derive(Parser)]
#[command(name = "sivi", version, about = "Semi-implicit variational inference benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `run.output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a run directory.
    Train(Common),
    /// Evaluate a trained run.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Run directory; overrides `eval.run_dir`.
        #[arg(long)]
        run: Option<PathBuf>,
    },
    /// Draw reference samples with Langevin dynamics.
    Sgld(Common),
    /// Sweep estimator variance diagnostics.
    DiagnoseVariance(Common),
}

fn load(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.run.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.run.output_dir = out.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<PathBuf, CliError> {
    match cli.command {
        Command::Train(c) => cmd_train(&load(&c)?),
        Command::Evaluate { common, run } => {
            cmd_evaluate(&load(&common)?, run.as_deref(), common.out.as_deref())
        }
        Command::Sgld(c) => cmd_sgld(&load(&c)?),
        Command::DiagnoseVariance(c) => cmd_diagnose_variance(&load(&c)?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
