//! Cascade encoder-decoder (CEDNet) backbones as typed layer graphs, with a
//! static analyzer, a graph executor on the `cednet-tensor` autodiff engine
//! and a toy segmentation lab.

pub mod analyzer;
pub mod build;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod executor;
pub mod gradcheck;
pub mod graph;
pub mod lab;
pub mod sweep;

pub use error::{Error, Result};
