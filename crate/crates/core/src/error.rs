//! Crate-wide error type, partitioned by how the CLI should exit.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    /// Malformed or inconsistent input: files, configs, schemas, shapes.
    #[error("{0}")]
    Data(String),
    /// Training produced a non-finite loss.
    #[error("training diverged: {0}")]
    Divergence(String),
}

impl Error {
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    /// Process exit code for this error (1 is reserved for CLI usage errors).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) | Error::Data(_) => 2,
            Error::Divergence(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
