use std::path::PathBuf;

use crate::manifest::Fold;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: png decode failed: {source}")]
    PngDecode {
        path: PathBuf,
        #[source]
        source: png::DecodingError,
    },
    #[error("{path}: png encode failed: {source}")]
    PngEncode {
        path: PathBuf,
        #[source]
        source: png::EncodingError,
    },
    #[error("{path}, line {line}: {source}")]
    Json {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("{fold} fold has {available} source digits; at least one is needed to place digits and crop clutter")]
    FoldTooSmall { fold: Fold, available: usize },
    #[error("labeled subset needs {requested} examples but only {eligible} are eligible (deficit {})", requested - eligible)]
    LabelDeficit { requested: usize, eligible: usize },
    #[error("invalid specification: {0}")]
    Spec(String),
    #[error("volume {case}: {reason}")]
    Volume { case: String, reason: String },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}

pub(crate) fn format_err(path: impl Into<PathBuf>, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.into(),
        reason: reason.into(),
    }
}
