//! Crate-wide error type and exit-code mapping.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or inconsistent configuration; the message names the offending key.
    #[error("configuration error: {0}")]
    Config(String),

    /// A quantity was requested outside the domain where it is defined
    /// (e.g. the inverse of a bounded depth profile past its saturation level).
    #[error("domain error: {0}")]
    Domain(String),

    /// Numerical failure during time stepping (non-finite values, singular solve).
    #[error("numerical error at time level {level}: {msg}")]
    Numerical { level: usize, msg: String },

    /// Two discretized objects that must share a grid do not.
    #[error("geometry mismatch: {0}")]
    Geometry(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: configuration-class failures exit 2,
    /// runtime numerical failures exit 3.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical { .. } => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
