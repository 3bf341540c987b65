use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the `bnnkh_core` crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("I/O error: {0}")]
    Stream(#[from] std::io::Error),

    #[error("download of {url} failed: {reason}")]
    Download { url: String, reason: String },

    #[error("integrity check failed for {file}: {reason}")]
    Integrity { file: String, reason: String },

    #[error("wrong magic: expected {expected}, found {found}")]
    WrongMagic { expected: u32, found: u32 },

    #[error("length mismatch: {0}")]
    Length(String),

    #[error("label {value} at index {index} is out of range 0..=9")]
    LabelRange { index: usize, value: u8 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("unsupported model file version {0}")]
    UnsupportedVersion(u32),

    #[error("invalid model file: {0}")]
    Format(String),

    #[error("invariant violated in layer {layer}, index {index}: {what}")]
    Invariant {
        layer: usize,
        index: usize,
        what: String,
    },

    #[error("key parse error at index {index}: {reason}")]
    KeyParse { index: usize, reason: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
