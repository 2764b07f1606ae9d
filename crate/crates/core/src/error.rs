use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("non-finite gradient for parameter {param} (first bad index {index})")]
    NonFiniteGradient { param: String, index: usize },

    #[error("optimizer update of {param} is non-finite (first bad index {index})")]
    NonFiniteUpdate { param: String, index: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward called on a value that is not connected to any differentiable leaf")]
    NoGraph,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("routing mode mismatch: expected {expected}, layer is {actual}")]
    ModeMismatch {
        expected: &'static str,
        actual: &'static str,
    },

    #[error("expert shape mismatch: {0}")]
    ExpertShape(String),

    #[error("invalid placement: {0}")]
    Placement(String),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged at step {step}: {reason}")]
    Diverged {
        step: u64,
        reason: String,
        last_good: Option<Box<crate::train::Checkpoint>>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
