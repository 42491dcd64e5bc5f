use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("dimension mismatch between {what}: {detail}")]
    DimensionMismatch { what: String, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("action outside bounds: {0}")]
    OutOfBounds(String),

    #[error("not normalized: mass {mass} (tolerance {tolerance})")]
    NotNormalized { mass: f64, tolerance: f64 },

    #[error("online buffer has {have} transitions, sampling blocked until {need}")]
    BlockedUntilFill { have: usize, need: usize },

    #[error("offline source has no episodes but {requested} offline samples were requested")]
    EmptyOfflineSource { requested: usize },

    #[error("episode of {len} transitions exceeds buffer capacity {capacity}")]
    EpisodeTooLong { len: usize, capacity: usize },

    #[error("subset size {size} exceeds episode count {count}")]
    SubsetTooLarge { size: usize, count: usize },

    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("dataset {0} is not sealed")]
    NotSealed(PathBuf),

    #[error("missing file: {0}")]
    Missing(PathBuf),

    #[error("experiment id {0} already exists in workspace")]
    DuplicateExperiment(String),

    #[error("training aborted: {0}")]
    TrainingAborted(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
