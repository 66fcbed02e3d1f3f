use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("unknown domain `{0}`")]
    UnknownDomain(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint write failed after epoch {epoch} (step {step}) at {path}: {source}")]
    CheckpointWrite {
        epoch: usize,
        step: u64,
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command line: 1 usage/config, 2 I/O, 3 format/schema.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Argument(_) | Error::UnknownDomain(_) => 1,
            Error::Io { .. } | Error::CheckpointWrite { .. } => 2,
            Error::Image { .. } | Error::Format(_) | Error::Schema(_) | Error::Shape(_) => 3,
        }
    }
}
