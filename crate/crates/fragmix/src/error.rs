//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("graph error: {0}")]
    Graph(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("degenerate features: {0}")]
    DegenerateFeatures(String),

    #[error("symmetry violation: {0}")]
    Symmetry(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("unsupported combination: {0}")]
    Unsupported(String),

    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: u64, msg: String },

    #[error("integration error: {0}")]
    Integration(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: configuration/usage problems exit 2,
    /// everything else (runtime, numerical, io) exits 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Dimension(_) => 2,
            _ => 1,
        }
    }
}
