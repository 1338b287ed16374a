//! Error types shared by every module.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: bad shapes, unknown layers, inconsistent specs.
    #[error("configuration error: {0}")]
    Config(String),

    /// Numeric failure: non-finite values, singular systems, divergence.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// API misuse: stale gradient tapes, missing calibration.
    #[error("usage error: {0}")]
    Usage(String),

    /// File format violations (IDX magic, CIFAR record length, ...).
    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 config, 3 numeric, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Usage(_) => 2,
            Error::Numeric(_) => 3,
            Error::Format(_) | Error::Io(_) => 4,
        }
    }
}
