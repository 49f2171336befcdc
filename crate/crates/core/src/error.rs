//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, VqcdError>;

#[derive(Debug, Error)]
pub enum VqcdError {
    #[error("shape mismatch in {op}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invariant violation: {0}")]
    Invariant(String),

    #[error("unknown task id {0}")]
    UnknownTask(usize),

    #[error("task {task}: dimension mismatch for {what}: expected {expected}, got {got}")]
    TaskDimension {
        task: usize,
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("mask capacity exhausted for tensor `{tensor}`: requested {requested}, remaining {remaining}")]
    CapacityExhausted {
        tensor: String,
        requested: usize,
        remaining: usize,
    },

    #[error("masks overlap on tensor `{0}`")]
    MaskOverlap(String),

    #[error("[stage:{stage}] missing artifact: {path}")]
    MissingArtifact { stage: &'static str, path: String },

    #[error("[stage:{stage}] {msg}")]
    Stage { stage: &'static str, msg: String },

    #[error("pipeline order violated: {what} requires {missing}")]
    PipelineOrder {
        what: &'static str,
        missing: String,
    },

    #[error("malformed {what} file `{path}`: {detail}")]
    Format {
        what: &'static str,
        path: String,
        detail: String,
    },

    #[error("i/o error on `{path}`: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl VqcdError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        VqcdError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        VqcdError::Config(msg.into())
    }

    pub fn invariant(msg: impl Into<String>) -> Self {
        VqcdError::Invariant(msg.into())
    }

    pub fn stage(stage: &'static str, msg: impl Into<String>) -> Self {
        VqcdError::Stage {
            stage,
            msg: msg.into(),
        }
    }
}
