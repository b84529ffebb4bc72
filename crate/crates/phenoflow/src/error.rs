//! Error types shared across the pipeline.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("requested rank {requested} exceeds achievable rank {achievable}")]
    RankDeficient { requested: usize, achievable: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
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

    pub fn malformed(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Malformed {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    pub fn stage(stage: &'static str, source: Error) -> Self {
        Error::Stage {
            stage,
            source: Box::new(source),
        }
    }

    /// True for errors caused by bad user input (missing or malformed files,
    /// out-of-range parameters) as opposed to failures arising mid-computation.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Io { .. } | Error::Malformed { .. } | Error::InvalidInput(_) => true,
            Error::ShapeMismatch(_) | Error::RankDeficient { .. } | Error::Numerical(_) => false,
            Error::Stage { source, .. } => source.is_validation(),
        }
    }
}
