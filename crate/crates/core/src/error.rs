//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("cholesky decomposition failed: leading minor {minor} is not positive definite (jitter {jitter:e})")]
    CholeskyFailure { minor: usize, jitter: f64 },

    #[error("triangular solve hit a zero diagonal entry at row {row}")]
    SingularTriangular { row: usize },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 config, 3 data, 4 numerical, 1 everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => 2,
            Error::Data(_) | Error::Io(_) => 3,
            Error::CholeskyFailure { .. }
            | Error::SingularTriangular { .. }
            | Error::Numerical(_) => 4,
            _ => 1,
        }
    }
}
