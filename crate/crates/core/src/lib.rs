//! Joint weight pruning and quantization of neural networks with ADMM,
//! plus a hardware-aware compression planner and a compact sparse model format.
//!
//! The flow is: pretrain a network ([`nn`]), prune it under per-layer
//! cardinality constraints ([`admm`], [`pipeline`]), retrain the survivors,
//! quantize them to equal-distance levels, and serialize the result
//! ([`format`]). [`planner`] chooses per-layer pruning targets from layer
//! compute cost and a platform's break-even pruning ratio.

mod bytes;

pub mod admm;
pub mod data;
pub mod error;
pub mod format;
pub mod nn;
pub mod pipeline;
pub mod planner;
pub mod projection;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
