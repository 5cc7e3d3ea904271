use std::io;

use thiserror::Error;

/// Errors raised anywhere in the crate.
///
/// The variants follow the failure classes callers care about: a shape or
/// dimension mismatch, a violated precondition, an out-of-range index, a
/// non-finite number, a metric that is undefined for the given input, and
/// I/O or format problems when reading artifacts.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {left:?} vs {right:?} ({context})")]
    Dimension {
        left: Vec<usize>,
        right: Vec<usize>,
        context: &'static str,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("out of bounds: {0}")]
    Bounds(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("stage {stage} requires {missing}")]
    Dependency { stage: String, missing: String },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit status for command-line use.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Contract(_)
            | Error::Bounds(_)
            | Error::Dimension { .. }
            | Error::Json(_) => 2,
            Error::Dependency { .. } => 3,
            Error::Numeric(_) | Error::Degenerate(_) | Error::UndefinedMetric(_) => 4,
            _ => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

pub(crate) fn bounds(msg: impl Into<String>) -> Error {
    Error::Bounds(msg.into())
}

pub(crate) fn numeric(msg: impl Into<String>) -> Error {
    Error::Numeric(msg.into())
}
