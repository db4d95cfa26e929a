use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::model::{Gradients, Masks, ModelGraph};
use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Anything that yields a scalar loss and parameter gradients for a batch.
pub trait Objective {
    fn loss_and_grads(
        &self,
        model: &ModelGraph,
        batch: &Tensor,
        labels: &[u8],
    ) -> Result<(f64, Gradients)>;
}

/// Plain softmax cross-entropy.
#[derive(Debug, Clone, Copy, Default)]
pub struct CrossEntropy;

impl Objective for CrossEntropy {
    fn loss_and_grads(
        &self,
        model: &ModelGraph,
        batch: &Tensor,
        labels: &[u8],
    ) -> Result<(f64, Gradients)> {
        model.loss_and_grads(batch, labels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Cap on minibatches per epoch; `None` runs a full pass.
    pub max_batches: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            max_batches: None,
        }
    }
}

/// Deterministic RNG for a named training stream.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One pass of minibatch ADAM over a shuffled `data`. Returns the mean batch loss.
pub fn train_epoch(
    model: &mut ModelGraph,
    adam: &mut AdamState,
    data: &Dataset,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
    objective: &dyn Objective,
    masks: Option<&Masks>,
) -> Result<f64> {
    if config.batch_size == 0 {
        return Err(invalid("batch size must be positive"));
    }
    if data.is_empty() {
        return Err(invalid("cannot train on an empty dataset"));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    let mut batches = 0usize;
    for chunk in order.chunks(config.batch_size) {
        if config.max_batches.is_some_and(|m| batches >= m) {
            break;
        }
        let (batch, labels) = data.batch(chunk);
        let (loss, grads) = objective.loss_and_grads(model, &batch, &labels)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { iteration: 0, loss });
        }
        adam.step(model, &grads, masks)?;
        total += loss;
        batches += 1;
    }
    Ok(total / batches.max(1) as f64)
}
