use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point {x} lies on a branch endpoint of the site map")]
    BranchBoundary { x: f64 },

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("inclusion-exclusion enumeration exceeded {limit} surviving families")]
    Overflow { limit: u64 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("{censored} of {total} hitting times are censored (more than 1%)")]
    TooCensored { censored: usize, total: usize },

    #[error("grid too large: {0}")]
    TooLarge(String),

    #[error("invalid value for `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("{path}: expected CSV columns {expected:?}, found {found:?}")]
    SchemaMismatch {
        path: PathBuf,
        expected: Vec<String>,
        found: Vec<String>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("thread pool: {0}")]
    ThreadPool(String),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Process exit code: 2 for validation errors, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::SchemaMismatch { .. } => 2,
            Error::BranchBoundary { .. }
            | Error::NoConvergence { .. }
            | Error::Overflow { .. }
            | Error::InsufficientData(_)
            | Error::TooCensored { .. }
            | Error::TooLarge(_) => 3,
            Error::Io(_) | Error::Csv(_) | Error::ThreadPool(_) => 1,
        }
    }
}
