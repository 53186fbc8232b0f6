use std::io;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
///
/// Variants fall into three coarse categories (configuration, data and
/// numeric problems) which the command-line front end reports separately;
/// see [`Error::category`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("reservoir hash mismatch: model {model:#018x}, state {state:#018x}")]
    HashMismatch { model: u64, state: u64 },

    #[error("format error: {0}")]
    Format(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Coarse error class used for exit reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Numeric,
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) => ErrorCategory::Config,
            Error::Numeric(_) => ErrorCategory::Numeric,
            Error::InvalidInput(_)
            | Error::Dimension { .. }
            | Error::HashMismatch { .. }
            | Error::Format(_)
            | Error::Io(_) => ErrorCategory::Data,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
