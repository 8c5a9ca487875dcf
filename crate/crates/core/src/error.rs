use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header in {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },

    #[error("missing config document: {0}")]
    MissingConfig(PathBuf),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("no checkpoint found under {0}")]
    NoCheckpoint(PathBuf),

    #[error("unknown architecture `{0}`; pass an explicit architecture override")]
    UnknownArchitecture(String),

    #[error("unknown tensor `{0}`")]
    UnknownTensor(String),

    #[error("tensor `{name}` has dtype {dtype}, only f32, f16 and bf16 can be decoded")]
    UnsupportedDtype { name: String, dtype: String },

    #[error("tensor name pattern mismatch: {0}")]
    PatternMismatch(String),

    #[error("inconsistent expert block in layer {layer}: {reason}")]
    InconsistentBlock { layer: usize, reason: String },

    #[error("payload for `{name}` is {actual} bytes, record expects {expected}")]
    LengthMismatch {
        name: String,
        expected: u64,
        actual: u64,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite value in input")]
    NonFinite,

    #[error("length mismatch: {0} vs {1}")]
    SampleLengthMismatch(usize, usize),

    #[error("index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("plan does not belong to this checkpoint (plan source {plan}, checkpoint {actual})")]
    PlanMismatch { plan: String, actual: String },

    #[error("output path {0} exists and is not empty")]
    OutputNotEmpty(PathBuf),

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

    pub(crate) fn malformed(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::MalformedHeader {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
