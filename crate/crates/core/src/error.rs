use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward already ran on this tape; record a new forward pass first")]
    TapeConsumed,

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("unknown parameter '{0}'")]
    UnknownParameter(String),

    #[error("duplicate parameter name '{0}'")]
    DuplicateParameter(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("registry line {line}: {msg}")]
    RegistryFormat { line: usize, msg: String },

    #[error("user '{0}' is already registered")]
    DuplicateUser(String),

    #[error("user '{0}' is not registered")]
    UnknownUser(String),

    #[error("could not draw a unique watermark after {0} attempts")]
    MessageCollision(usize),

    #[error("registry is empty")]
    EmptyRegistry,

    #[error("target FPR {target:e} is unreachable; the minimum achievable is {min_achievable:e}")]
    UnreachableFpr { target: f64, min_achievable: f64 },

    #[error("{stage} diverged at step {step} (loss = {loss})")]
    Divergence {
        stage: &'static str,
        step: usize,
        loss: f32,
    },

    #[error("frozen tensor '{0}' changed during training")]
    FrozenTensorChanged(String),

    #[error("image: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
