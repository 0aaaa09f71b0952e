use std::path::PathBuf;

use tat_core::data::DataError;
use tat_core::evaluation::EvalError;
use tat_core::model::ModelError;
use tat_core::training::TrainError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot read {}: {source}", path.display())]
    Missing {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}: {message}", path.display())]
    BadConfig { path: PathBuf, message: String },
    #[error("{0}")]
    Usage(String),
    #[error("gradient check failed: relative error {error:.3e} at `{param}` exceeds {tolerance:e}")]
    Gradcheck {
        param: String,
        error: f64,
        tolerance: f64,
    },
    #[error("cannot write {}: {source}", path.display())]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
}

fn model_exit(e: &ModelError) -> u8 {
    match e {
        ModelError::Config(_) | ModelError::Schema(_) => 2,
        _ => 1,
    }
}

fn eval_exit(e: &EvalError) -> u8 {
    match e {
        EvalError::NoEventMatch { .. } => 3,
        EvalError::Run { source, .. } => eval_exit(source),
        EvalError::Model(m) => model_exit(m),
        EvalError::Train(t) => train_exit(t),
        _ => 1,
    }
}

fn train_exit(e: &TrainError) -> u8 {
    match e {
        TrainError::Config(_) => 2,
        TrainError::Model(m) => model_exit(m),
        _ => 1,
    }
}

impl CliError {
    /// 2: missing input or invalid configuration; 3: event week not covered;
    /// 1: everything else, including a failed gradient check.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Missing { .. } | CliError::BadConfig { .. } | CliError::Usage(_) => 2,
            CliError::Eval(e) => eval_exit(e),
            CliError::Train(e) => train_exit(e),
            CliError::Model(e) => model_exit(e),
            CliError::Data(DataError::Config(_)) => 2,
            _ => 1,
        }
    }
}
