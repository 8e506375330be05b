//! Dense NCHW tensors and a tape-based reverse-mode autodiff engine.
//!
//! The operator set is deliberately small: exactly what the cascade
//! encoder-decoder graphs, their segmentation head and the training loss
//! need. Kernels live in [`ops`] as pure functions over [`Tensor`] values;
//! [`Tape`] records them and replays the chain rule in reverse.

pub mod dump;
pub mod element;
pub mod error;
pub mod ops;
pub mod tape;
pub mod tensor;

pub use element::{DType, Element};
pub use error::{Result, TensorError};
pub use ops::Conv2dParams;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
