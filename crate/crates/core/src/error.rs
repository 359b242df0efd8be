use std::path::PathBuf;

use crate::backend::BackendError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure category, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Backend,
    Data,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: parse error: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: schema error: field `{field}` must be a string")]
    Schema { line: usize, field: String },

    #[error("{path}: invalid JSON: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("empty dev set")]
    EmptyDevSet,

    #[error("invalid data: {0}")]
    Invalid(String),

    #[error("unknown class `{0}`")]
    UnknownClass(String),

    #[error("class {0} has no separable words")]
    NoSeparableWords(String),

    #[error("class `{0}` has no training samples")]
    EmptyClass(String),

    #[error("class `{class}` has {available} eligible samples, {required} required")]
    InsufficientSamples {
        class: String,
        available: usize,
        required: usize,
    },

    #[error("nothing to insert")]
    NothingToInsert,

    #[error("missing upstream artifact {0}")]
    MissingArtifact(PathBuf),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Backend(#[from] BackendError),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Config,
            Error::Backend(_) => ErrorKind::Backend,
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
