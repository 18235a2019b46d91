//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the library. Fallible constructors return these
/// rather than panicking so callers can map failure classes to exit codes.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor operands have incompatible shapes for the requested operation.
    #[error("shape mismatch in {op}: {details}")]
    ShapeMismatch { op: &'static str, details: String },

    /// A configuration or argument value is outside its legal range.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A data file could not be parsed.
    #[error("data format error in {path}: {details}")]
    DataFormat { path: String, details: String },

    /// Underlying I/O failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// A numeric computation produced a non-finite value or failed to
    /// converge (for example a Cholesky factorization that stays
    /// indefinite after jitter escalation).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A gradient tape was used after being consumed by `backward`.
    #[error("tape usage error: {0}")]
    TapeUsage(String),
}

/// Convenience alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;
