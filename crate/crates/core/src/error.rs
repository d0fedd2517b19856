use thiserror::Error;

/// Errors produced anywhere in the stack.
#[derive(Debug, Error)]
pub enum SacError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid input shape {shape:?}: {reason}")]
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },

    #[error("value handle does not belong to this tape (tape {expected}, handle {got})")]
    NotOnTape { expected: u64, got: u64 },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("backward already ran on this tape; call clear() before reusing it")]
    BackwardAlreadyRan,

    #[error("non-finite value detected in output of {op}")]
    NonFinite { op: &'static str },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed file: {reason}")]
    Format { path: String, reason: String },

    #[error("checkpoint config digest mismatch: file was written for a different model configuration")]
    DigestMismatch,

    #[error("training aborted: non-finite loss at epoch {epoch}, batch {batch}")]
    NanLoss { epoch: usize, batch: usize },
}

impl SacError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        SacError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, SacError>;
