//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by solvers, geometry primitives, and data ingestion.
#[derive(Debug, Error)]
pub enum PrwError {
    /// Matrix or vector shapes do not conform.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// An argument violates a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A computation produced non-finite values or hit a degenerate case.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// File could not be read or written.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A data file could not be parsed.
    #[error("parse error in {path} (row {row}): {message}")]
    Parse {
        path: String,
        row: usize,
        message: String,
    },
}

pub type Result<T> = std::result::Result<T, PrwError>;
