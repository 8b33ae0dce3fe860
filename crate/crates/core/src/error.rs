//! Error type shared across the library.

use thiserror::Error;

/// Library-wide error type.
///
/// Variants map onto the failure classes surfaced by the CLI: bad arguments
/// and malformed inputs, numerical breakdowns, and samplers that finished
/// without converging.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Input file could not be parsed; `line` is 1-based and includes headers.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("sampler unconverged: {0}")]
    Unconverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}
