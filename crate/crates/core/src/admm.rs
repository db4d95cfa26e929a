//! ADMM splitting of a constrained training problem.
//!
//! Each constrained layer carries an auxiliary copy `Z` (kept inside the
//! constraint set) and a scaled dual `U`. One iteration trains `W` on the
//! loss plus `Σ ρ/2 ‖W − Z + U‖²`, then sets `Z = Π(W + U)` and
//! `U += W − Z`.

use std::collections::BTreeMap;
use std::fmt;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{evaluate, Dataset};
use crate::error::{invalid, shape_err, Error, Result};
use crate::nn::{
    train_epoch, AdamConfig, AdamState, Gradients, Masks, ModelGraph, Objective, TrainConfig,
};
use crate::projection::ConstraintSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdmmConfig {
    pub rho: f64,
    /// Per-layer penalty overrides, keyed by layer name.
    pub rho_overrides: BTreeMap<String, f64>,
    pub max_iterations: usize,
    pub epochs_per_iteration: usize,
    /// Stop once every layer has `‖W − Z‖ / ‖W‖` at or below this.
    pub tolerance: f64,
    pub train: TrainConfig,
    pub adam: AdamConfig,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        Self {
            rho: 3e-3,
            rho_overrides: BTreeMap::new(),
            max_iterations: 50,
            epochs_per_iteration: 1,
            tolerance: 0.02,
            train: TrainConfig::default(),
            adam: AdamConfig::default(),
        }
    }
}

impl AdmmConfig {
    pub fn rho_for(&self, layer_name: &str) -> f64 {
        self.rho_overrides.get(layer_name).copied().unwrap_or(self.rho)
    }

    pub fn validate(&self) -> Result<()> {
        let rhos = std::iter::once(&self.rho).chain(self.rho_overrides.values());
        if rhos.into_iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(invalid("rho must be positive"));
        }
        if self.max_iterations == 0 || self.epochs_per_iteration == 0 {
            return Err(invalid("iteration and epoch counts must be positive"));
        }
        if !(self.tolerance >= 0.0) {
            return Err(invalid("tolerance must be non-negative"));
        }
        Ok(())
    }
}

/// Constraint requested for one layer. `mask` (quantization only) marks the
/// weights that survive pruning; the others stay at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerConstraint {
    pub layer: usize,
    pub constraint: ConstraintSet,
    pub mask: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmmLayer {
    pub layer: usize,
    pub name: String,
    pub constraint: ConstraintSet,
    pub mask: Option<Tensor>,
    pub rho: f64,
    pub z: Tensor,
    pub u: Tensor,
}

impl AdmmLayer {
    /// Starts from `Z = Π(W)`, `U = 0`.
    pub fn new(
        layer: usize,
        name: impl Into<String>,
        constraint: ConstraintSet,
        mask: Option<Tensor>,
        rho: f64,
        weight: &Tensor,
    ) -> Result<Self> {
        if let Some(m) = &mask {
            m.ensure_same_shape(weight, "constraint mask")?;
        }
        if let ConstraintSet::Cardinality { alpha } = constraint {
            if alpha > weight.len() {
                return Err(invalid(format!(
                    "alpha {alpha} exceeds the {} weights of layer {layer}",
                    weight.len()
                )));
            }
        }
        let z = constraint.project(weight, mask.as_ref())?;
        Ok(Self {
            layer,
            name: name.into(),
            constraint,
            mask,
            rho,
            z,
            u: Tensor::zeros(weight.shape()),
        })
    }

    pub fn project(&self, v: &Tensor) -> Result<Tensor> {
        self.constraint.project(v, self.mask.as_ref())
    }

    /// `Z = Π(W + U)`, then `U += W − Z`.
    pub fn update(&mut self, weight: &Tensor) -> Result<()> {
        weight.ensure_same_shape(&self.z, "ADMM weight")?;
        let shifted = weight.zip_map(&self.u, |w, u| w + u)?;
        self.z = self.project(&shifted)?;
        for ((u, &w), &z) in self.u.data_mut().iter_mut().zip(weight.data()).zip(self.z.data()) {
            *u += w - z;
        }
        Ok(())
    }

    /// `ρ/2 ‖W − Z + U‖²`.
    pub fn penalty(&self, weight: &Tensor) -> f64 {
        let s: f64 = weight
            .data()
            .iter()
            .zip(self.z.data())
            .zip(self.u.data())
            .map(|((w, z), u)| {
                let d = w - z + u;
                d * d
            })
            .sum();
        0.5 * self.rho * s
    }

    /// `‖W − Z‖ / ‖W‖` (plain `‖W − Z‖` when `W = 0`).
    pub fn residual(&self, weight: &Tensor) -> f64 {
        let d = weight.distance(&self.z);
        let n = weight.norm();
        if n > 0.0 {
            d / n
        } else {
            d
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmmState {
    pub layers: Vec<AdmmLayer>,
    /// Completed iterations.
    pub iteration: usize,
}

impl AdmmState {
    /// Training masks for the constrained layers (quantization phase).
    pub fn training_masks(&self, model: &ModelGraph) -> Option<Masks> {
        if self.layers.iter().all(|l| l.mask.is_none()) {
            return None;
        }
        let mut masks = Masks::none(model);
        for l in &self.layers {
            masks.0[l.layer] = l.mask.clone();
        }
        Some(masks)
    }

    pub fn penalty(&self, model: &ModelGraph) -> f64 {
        self.layers.iter().map(|l| l.penalty(model.weight(l.layer))).sum()
    }

    pub fn residuals(&self, model: &ModelGraph) -> Vec<(String, f64)> {
        self.layers
            .iter()
            .map(|l| (l.name.clone(), l.residual(model.weight(l.layer))))
            .collect()
    }

    pub fn max_residual(&self, model: &ModelGraph) -> f64 {
        self.residuals(model).iter().fold(0.0, |m, (_, r)| m.max(*r))
    }

    /// Auxiliary and dual updates against the current weights.
    pub fn update(&mut self, model: &ModelGraph) -> Result<()> {
        for l in &mut self.layers {
            l.update(model.weight(l.layer))?;
        }
        self.iteration += 1;
        Ok(())
    }
}

pub fn admm_init(
    model: &ModelGraph,
    constraints: Vec<LayerConstraint>,
    config: &AdmmConfig,
) -> Result<AdmmState> {
    config.validate()?;
    let mut layers = Vec::with_capacity(constraints.len());
    for c in constraints {
        let layer = model
            .layers
            .get(c.layer)
            .filter(|l| l.params.is_some())
            .ok_or_else(|| invalid(format!("layer {} has no weights", c.layer)))?;
        if layers.iter().any(|l: &AdmmLayer| l.layer == c.layer) {
            return Err(invalid(format!("layer {} constrained twice", c.layer)));
        }
        let rho = config.rho_for(&layer.name);
        layers.push(AdmmLayer::new(
            c.layer,
            layer.name.clone(),
            c.constraint,
            c.mask,
            rho,
            model.weight(c.layer),
        )?);
    }
    Ok(AdmmState {
        layers,
        iteration: 0,
    })
}

/// Cross-entropy plus the augmented-Lagrangian penalty, with gradients.
pub fn admm_loss_and_grads(
    model: &ModelGraph,
    batch: &Tensor,
    labels: &[u8],
    state: &AdmmState,
) -> Result<(f64, Gradients)> {
    let (loss, mut grads) = model.loss_and_grads(batch, labels)?;
    let mut penalty = 0.0;
    for l in &state.layers {
        let w = model.weight(l.layer);
        penalty += l.penalty(w);
        let g = grads
            .layer_mut(l.layer)
            .ok_or_else(|| shape_err(format!("no gradient slot for layer {}", l.layer)))?;
        for (((g, &w), &z), &u) in g
            .weight
            .data_mut()
            .iter_mut()
            .zip(w.data())
            .zip(l.z.data())
            .zip(l.u.data())
        {
            *g += l.rho * (w - z + u);
        }
    }
    Ok((loss + penalty, grads))
}

impl Objective for AdmmState {
    fn loss_and_grads(
        &self,
        model: &ModelGraph,
        batch: &Tensor,
        labels: &[u8],
    ) -> Result<(f64, Gradients)> {
        admm_loss_and_grads(model, batch, labels, self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub phase: String,
    pub iteration: usize,
    /// Mean penalized training loss over the iteration's batches.
    pub loss: f64,
    pub residuals: Vec<(String, f64)>,
    pub max_residual: f64,
    pub validation_accuracy: Option<f64>,
}

impl fmt::Display for IterationRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "phase={} iter={} loss={:.6} max_residual={:.6}",
            self.phase, self.iteration, self.loss, self.max_residual
        )?;
        for (name, r) in &self.residuals {
            write!(f, " residual.{name}={r:.6}")?;
        }
        if let Some(acc) = self.validation_accuracy {
            write!(f, " val_acc={acc:.4}")?;
        }
        Ok(())
    }
}

/// One ADMM iteration: `epochs_per_iteration` epochs of penalized training,
/// then the `Z` and `U` updates. Masked-out weights are frozen.
pub fn admm_iterate(
    model: &mut ModelGraph,
    state: &mut AdmmState,
    adam: &mut AdamState,
    data: &Dataset,
    config: &AdmmConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    let masks = state.training_masks(model);
    let iteration = state.iteration + 1;
    let mut loss = 0.0;
    for _ in 0..config.epochs_per_iteration {
        loss = train_epoch(model, adam, data, &config.train, rng, &*state, masks.as_ref())
            .map_err(|e| match e {
                Error::Divergence { loss, .. } => Error::Divergence { iteration, loss },
                other => other,
            })?;
    }
    if state.layers.iter().any(|l| !model.weight(l.layer).is_finite()) {
        return Err(Error::Divergence {
            iteration,
            loss: f64::NAN,
        });
    }
    state.update(model)?;
    Ok((loss, state.max_residual(model)))
}

/// Iterates until every residual is within tolerance or the iteration cap
/// is hit. `on_iteration` sees each record as it is produced.
#[allow(clippy::too_many_arguments)]
pub fn admm_run(
    model: &mut ModelGraph,
    state: &mut AdmmState,
    data: &Dataset,
    validation: Option<&Dataset>,
    config: &AdmmConfig,
    phase: &str,
    rng: &mut ChaCha8Rng,
    on_iteration: &mut dyn FnMut(&IterationRecord),
) -> Result<Vec<IterationRecord>> {
    config.validate()?;
    let mut adam = AdamState::new(model, config.adam);
    let mut log = Vec::new();
    while state.iteration < config.max_iterations {
        let (loss, max_residual) = admm_iterate(model, state, &mut adam, data, config, rng)?;
        let validation_accuracy = validation.map(|v| evaluate(model, v)).transpose()?;
        let record = IterationRecord {
            phase: phase.to_string(),
            iteration: state.iteration,
            loss,
            residuals: state.residuals(model),
            max_residual,
            validation_accuracy,
        };
        on_iteration(&record);
        log.push(record);
        if max_residual <= config.tolerance {
            break;
        }
    }
    Ok(log)
}

/// Hard-projects every constrained layer, `W = Π(W)`, and returns masks of
/// the surviving weights (all weighted layers; unconstrained ones marked by
/// their nonzeros).
pub fn admm_finalize(model: &mut ModelGraph, state: &AdmmState) -> Result<Masks> {
    for l in &state.layers {
        let projected = l.project(model.weight(l.layer))?;
        *model.weight_mut(l.layer) = projected;
    }
    Ok(Masks::from_nonzeros(model))
}
