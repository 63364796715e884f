use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure class, used by the driver to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("duplicate id `{0}`")]
    DuplicateId(String),

    #[error("no embedding for id `{0}`")]
    MissingEmbedding(String),

    #[error("no teacher score for pair (query `{query_id}`, passage `{passage_id}`)")]
    MissingScore {
        query_id: String,
        passage_id: String,
    },

    #[error("unknown passage id `{0}`")]
    UnknownPassage(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("degenerate embedding `{0}`: zero norm")]
    ZeroNorm(String),

    #[error("degenerate teacher: 1st and 99th percentile coincide at {0}")]
    DegenerateTeacher(f64),

    #[error("empty embedding store")]
    EmptyStore,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("threshold {threshold}: {source}")]
    AtThreshold {
        threshold: f64,
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

    pub fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidArgument(message.into())
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidArgument(_) => ErrorClass::Usage,
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
                ErrorClass::Usage
            }
            Error::NonFinite(_) | Error::DegenerateTeacher(_) => ErrorClass::Numeric,
            Error::AtThreshold { source, .. } => source.class(),
            _ => ErrorClass::Data,
        }
    }
}
