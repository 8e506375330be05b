use cednet_tensor::TensorError;

use crate::config::ConfigError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("graph construction failed at {node}: {msg}")]
    Build { node: String, msg: String },
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("graph has no multi-scale fusion node")]
    NoFusion,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint checksum mismatch: manifest says {expected}, payload hashes to {actual}")]
    Checksum { expected: String, actual: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("training diverged at step {step}: loss {loss} exceeds 10x the initial loss {initial}")]
    Diverged { step: usize, loss: f64, initial: f64 },
    #[error("{0}")]
    Invalid(String),
}

impl Error {
    /// True for failures of the numerics rather than of inputs or I/O.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Diverged { .. } | Error::Tensor(TensorError::NonFinite(_)))
    }
}
