use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape error in {op}: {msg}")]
    Shape { op: &'static str, msg: String },
    #[error("invalid configuration for {op}: {msg}")]
    Config { op: &'static str, msg: String },
    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("loss does not depend on any tensor that requires grad")]
    DetachedGraph,
    #[error("backward already ran on this tape; call reset_grads first")]
    BackwardTwice,
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("tensor dump: {0}")]
    Dump(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(op: &'static str, msg: impl Into<String>) -> Result<T> {
    Err(TensorError::Shape { op, msg: msg.into() })
}
