//! Crate-wide error type.

use std::fmt;

/// Errors produced by geometry, network, training, data and pipeline code.
#[derive(Debug)]
pub enum Error {
    /// Tensor/grid shape disagreement, with a description of the mismatch.
    Shape(String),
    /// Invalid configuration or argument value.
    Config(String),
    /// Non-finite values detected mid-computation. Carries the operation
    /// name and, for recurrent updates, the iteration index that failed.
    NumericHealth {
        context: String,
        iteration: Option<usize>,
    },
    /// File parse failure with the byte offset where it was detected.
    Parse { offset: usize, message: String },
    /// Checkpoint serialization/deserialization failure.
    Checkpoint(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::NumericHealth { context, iteration } => match iteration {
                Some(i) => write!(f, "numeric health: non-finite values in {context} at iteration {i}"),
                None => write!(f, "numeric health: non-finite values in {context}"),
            },
            Error::Parse { offset, message } => {
                write!(f, "parse error at byte {offset}: {message}")
            }
            Error::Checkpoint(msg) => write!(f, "checkpoint error: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True for errors that should map to the numeric-health process exit code.
    pub fn is_numeric_health(&self) -> bool {
        matches!(self, Error::NumericHealth { .. })
    }
}
