use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("format error in {path} at byte {offset}: {message}")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("empty concept pool: {0}")]
    EmptyPool(String),

    #[error("empty model: every concept was pruned")]
    EmptyModel,

    #[error("numerical abort: {0}")]
    Numerical(String),

    #[error("lineage mismatch: {0}")]
    Lineage(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            offset,
            message: message.into(),
        }
    }

    /// Process exit code used by the command-line front end.
    ///
    /// 2 covers every input problem, 3 a stale artifact, 4 a numerical abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Lineage(_) => 3,
            Error::Numerical(_) => 4,
            _ => 2,
        }
    }
}
