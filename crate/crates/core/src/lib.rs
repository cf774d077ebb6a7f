//! Rewrite DeiT vision transformers into convolution-only graphs, inherit
//! their weights, quantize them to INT8, and check that nothing was lost.

pub mod checkpoint;
pub mod error;
pub mod graph;
pub mod harness;
pub mod quant;
pub mod rewrite;
pub mod tensor;

pub use error::{Error, Result};
