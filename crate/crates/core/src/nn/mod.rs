//! Dense-tensor network engine: layers, reverse-mode gradients, ADAM and checkpoints.

mod adam;
pub mod checkpoint;
mod kernels;
mod layer;
mod model;
mod train;

pub use adam::{AdamConfig, AdamState};
pub use layer::{Conv2d, LayerSpec};
pub use model::{forward_layer, lenet5_specs, Gradients, Layer, LayerParams, Masks, ModelGraph};
pub use train::{stream_rng, train_epoch, CrossEntropy, Objective, TrainConfig};
