use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("loss evaluated to a non-finite value ({0})")]
    NonFiniteLoss(f64),

    #[error("direction vector has zero norm")]
    DegenerateVector,

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("label kind mismatch: task expects {expected}, batch holds {got}")]
    LabelKindMismatch { expected: String, got: String },

    #[error("parameter layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("non-finite parameter at index {0}")]
    NonFiniteParam(usize),

    #[error("bad configuration: {0}")]
    BadConfig(String),

    #[error("unknown task {0}")]
    UnknownTask(String),

    #[error("meta split violated: {0}")]
    SplitViolation(String),

    #[error("test set is empty")]
    EmptyTestSet,

    #[error("parse error at line {line} (key `{key}`): {message}")]
    Parse {
        line: usize,
        key: String,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("format version mismatch: file has {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("corrupt file: {0}")]
    CorruptFile(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
