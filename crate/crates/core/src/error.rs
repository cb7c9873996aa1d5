use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("tensor file format error: {field}: {detail}")]
    Format { field: &'static str, detail: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("speaker lookup error: id {id} out of range for table of {size}")]
    Lookup { id: usize, size: usize },

    #[error("numeric error at decoder step {step}: {detail}")]
    Numeric { step: usize, detail: String },

    #[error("data error in utterance {utt_id}: {detail}")]
    Data { utt_id: String, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("stop contract violated: step {step} >= limit {limit}")]
    StopContract { step: usize, limit: usize },

    #[error("insufficient length: {have} frames, need at least {need}")]
    InsufficientLength { have: usize, need: usize },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {detail}")]
    Parse { path: PathBuf, detail: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad inputs rather than runtime failures.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Numeric { .. } | Error::Io { .. })
    }
}
