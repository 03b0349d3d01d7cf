use thiserror::Error;

#[derive(Debug, Error)]
pub enum SigError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("no events")]
    NoEvents,

    #[error("unknown node {0}")]
    UnknownNode(usize),

    #[error("no temporal context")]
    NoTemporalContext,

    #[error("no structural context")]
    NoStructuralContext,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SigError>;

pub(crate) fn invalid(msg: impl Into<String>) -> SigError {
    SigError::InvalidArgument(msg.into())
}
