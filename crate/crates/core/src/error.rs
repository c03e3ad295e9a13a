use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the assimilation toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    DimensionMismatch {
        expected: usize,
        actual: usize,
        context: &'static str,
    },

    #[error("integration produced non-finite state after {step} steps")]
    IntegrationOverflow { step: usize },

    #[error("matrix factorization failed: {0}")]
    Factorization(String),

    #[error("degenerate ensemble: {0}")]
    DegenerateEnsemble(String),

    #[error("degenerate matrix: {0}")]
    DegenerateMatrix(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid hyper-parameter: {0}")]
    InvalidHyperParameter(String),

    #[error("linear solve failed: {0}")]
    LinearSolve(String),

    #[error("ensemble size {0} unsupported by correlation-based localization (needs more than 9 members)")]
    UnsupportedEnsembleSize(usize),

    #[error("hyper-parameter ensemble collapsed (zero spread)")]
    CollapsedEnsemble,

    #[error("assimilation cycle failed: {0}")]
    CycleFailure(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error at {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("JSON error at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("config parse error: {0}")]
    ConfigParse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn ensure_len(actual: usize, expected: usize, context: &'static str) -> Result<()> {
    if actual == expected {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            expected,
            actual,
            context,
        })
    }
}
