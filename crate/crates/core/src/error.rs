use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension { context: String, expected: String, got: String },

    #[error("matrix {0} is singular")]
    Singular(&'static str),

    #[error("parameters are infeasible: {0}")]
    Infeasible(String),

    #[error("non-finite value at step {step} of simulation")]
    NonFinite { step: usize },

    #[error("integration diverged at t = {time} s")]
    Diverged { time: f64 },

    #[error("system is not stable: {0}")]
    NotStable(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

impl Error {
    pub(crate) fn dim(context: &str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Dimension { context: context.to_string(), expected: expected.to_string(), got: got.to_string() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl ToString) -> Self {
        Error::Format { path: path.into(), msg: msg.to_string() }
    }
}
