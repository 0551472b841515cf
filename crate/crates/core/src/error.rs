//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not line up for an operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An operation precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A run configuration is invalid or incomplete.
    #[error("configuration error: {0}")]
    Config(String),

    /// A data file could not be parsed.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// A non-finite value was produced where finiteness is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Checkpoint container is malformed or inconsistent.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable process exit code for the CLI, one per error category.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Parse { .. } => 3,
            Error::Contract(_) => 4,
            Error::Numeric(_) => 5,
            Error::Checkpoint(_) => 6,
            Error::Shape(_) => 7,
            Error::Io(_) => 8,
        }
    }
}
