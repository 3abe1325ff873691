use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the sadkit pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("no line matched a reasoning or action pattern")]
    NoSupervisedSpans,
    #[error("line {line} matches both the reasoning and the action pattern")]
    ConflictingMatch { line: usize },
    #[error("invalid segmentation rules: {0}")]
    InvalidRules(String),
    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },

    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("token {token} at {start}..{end} straddles a span boundary")]
    BoundaryStraddle { token: usize, start: usize, end: usize },
    #[error("malformed vocabulary: {0}")]
    InvalidVocab(String),

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    IdOutOfRange { id: u32, vocab: usize },
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("loss weight must be non-negative, got {0}")]
    NegativeWeight(f64),
    #[error("non-finite loss at step {step} (task {task_id}): {detail}")]
    NonFiniteLoss {
        step: usize,
        task_id: String,
        detail: String,
    },

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptFile(String),

    #[error("state is not solvable")]
    Unsolvable,
    #[error("metric over an empty episode set")]
    EmptySet,
    #[error("teacher reasoning span is empty for episode {0}")]
    EmptyTeacherSpan(usize),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
