//! Batch driver: configuration, benchmark registry and the `train`,
//! `evaluate`, `sgld` and `diagnose-variance` commands.

use std::path::PathBuf;

use thiserror::Error;

pub mod benchmarks;
pub mod commands;
pub mod config;

pub use benchmarks::{Benchmark, BenchmarkId};
pub use commands::{cmd_diagnose_variance, cmd_evaluate, cmd_sgld, cmd_train};
pub use config::{RunConfig, RunMethod};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("training diverged ({message}); partial results in {}", run_dir.display())]
    Diverged { run_dir: PathBuf, message: String },
    #[error("checkpoint {}: {source}", path.display())]
    Checkpoint {
        path: PathBuf,
        source: sivi::training::CheckpointError,
    },
    #[error(transparent)]
    Target(#[from] sivi::targets::TargetError),
    #[error(transparent)]
    Train(#[from] sivi::training::TrainError),
    #[error(transparent)]
    Eval(#[from] sivi::eval::EvalError),
    #[error(transparent)]
    Diagnostics(#[from] sivi::diagnostics::DiagnosticsError),
    #[error(transparent)]
    Model(#[from] sivi::sivi::ModelError),
    #[error(transparent)]
    Proposal(#[from] sivi::proposal::ProposalError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}
