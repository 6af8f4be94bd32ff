use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = DameError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DameError {
    #[error("cannot normalize a zero vector")]
    ZeroVector,
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("prefix dimension {0} is not part of the nesting set")]
    InvalidPrefix(usize),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("weighting scheme does not fit J={j}, K={k}: {reason}")]
    SchemeShapeMismatch { j: usize, k: usize, reason: &'static str },
    #[error("a single duration requires alpha = 1 (got {0})")]
    DegenerateDurations(f64),
    #[error("invalid duration: {0}")]
    InvalidDuration(String),
    #[error("speaker {speaker} has {available} utterances, need {needed}")]
    InsufficientUtterances {
        speaker: usize,
        available: usize,
        needed: usize,
    },
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("corrupt checkpoint {path}: {reason}")]
    CheckpointCorrupt { path: PathBuf, reason: String },
    #[error("corrupt data file {path}: {reason}")]
    DataCorrupt { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl DameError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DameError::Io {
            path: path.into(),
            source,
        }
    }
}
