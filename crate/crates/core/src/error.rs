use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library. CLI exit codes are derived from the
/// variant (see [`Error::exit_code`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dataset has no labels")]
    Unlabeled,

    #[error("empty input: {0}")]
    Empty(String),

    #[error("zero kernel bandwidth: all points coincide and no fixed bandwidth was supplied")]
    ZeroBandwidth,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: total loss is {value}")]
    Divergence { epoch: usize, batch: usize, value: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint version mismatch: file has {found}, expected {expected}")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("validation failed: {0}")]
    Validation(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// 0 success, 1 validation failure, 2 usage error, 3 numerical divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) => 1,
            Error::Divergence { .. } | Error::NonFinite(_) => 3,
            Error::InvalidArgument(_) | Error::Config(_) | Error::Empty(_) => 2,
            _ => 1,
        }
    }
}
