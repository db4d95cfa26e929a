//! Prune, retrain, then quantize: the joint compression flow.
//!
//! Pruning always precedes quantization. [`compress`] runs ADMM under
//! per-layer cardinality constraints, hard-prunes, retrains the survivors
//! with the pruned positions frozen, fits one interval per layer and runs
//! ADMM again under quantization constraints on the surviving weights only.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::admm::{admm_finalize, admm_init, admm_run, AdmmConfig, IterationRecord, LayerConstraint};
use crate::data::{evaluate, Dataset};
use crate::error::{invalid, Result};
use crate::format::{encode, size_report, CompressedModel, IndexBits, SizeReport};
use crate::nn::{stream_rng, train_epoch, AdamConfig, AdamState, CrossEntropy, Masks, ModelGraph, TrainConfig};
use crate::planner::{model_cost_report, AccuracyProbe, CompressionPlan, CostReport};
use crate::projection::{fit_interval, quantization_error, ConstraintSet, Quantizer, MAX_BITS};
use crate::tensor::Tensor;

/// RNG streams, one per phase, all derived from the run seed.
const STREAM_PRUNE: u64 = 2;
const STREAM_RETRAIN: u64 = 3;
const STREAM_QUANTIZE: u64 = 4;
const STREAM_PROBE: u64 = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub prune: AdmmConfig,
    pub quantize: AdmmConfig,
    /// Masked retraining epochs between the two phases.
    pub retrain_epochs: usize,
    pub retrain: TrainConfig,
    pub retrain_adam: AdamConfig,
    /// Phases whose validation accuracy ends below this are flagged.
    pub accuracy_floor: Option<f64>,
    /// For layers planned with `bits: null`: the smallest `n ≤ 8` whose
    /// squared quantization error is at most this fraction of `‖w‖²`.
    pub auto_bits_tolerance: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            prune: AdmmConfig::default(),
            quantize: AdmmConfig::default(),
            retrain_epochs: 2,
            retrain: TrainConfig::default(),
            retrain_adam: AdamConfig::default(),
            accuracy_floor: None,
            auto_bits_tolerance: 0.01,
        }
    }
}

/// Progress of a compression run; `Display` gives one key=value line.
#[derive(Debug, Clone, PartialEq)]
pub enum PipelineEvent {
    Iteration(IterationRecord),
    Retrain { epoch: usize, loss: f64, validation_accuracy: Option<f64> },
    Phase { phase: String, validation_accuracy: Option<f64>, below_floor: bool },
}

impl fmt::Display for PipelineEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PipelineEvent::Iteration(r) => write!(f, "{r}"),
            PipelineEvent::Retrain {
                epoch,
                loss,
                validation_accuracy,
            } => {
                write!(f, "phase=retrain epoch={epoch} loss={loss:.6}")?;
                if let Some(a) = validation_accuracy {
                    write!(f, " val_acc={a:.4}")?;
                }
                Ok(())
            }
            PipelineEvent::Phase {
                phase,
                validation_accuracy,
                below_floor,
            } => {
                write!(f, "phase={phase} done=true")?;
                if let Some(a) = validation_accuracy {
                    write!(f, " val_acc={a:.4}")?;
                }
                write!(f, " below_floor={below_floor}")
            }
        }
    }
}

pub type Observer<'a> = &'a mut dyn FnMut(&PipelineEvent);

/// Called with each probed allocation and its accuracy.
pub type ProbeObserver<'a> = Box<dyn FnMut(&[(usize, usize)], f64) + 'a>;

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseOutcome {
    pub records: Vec<IterationRecord>,
    pub validation_accuracy: Option<f64>,
    pub below_floor: bool,
}

fn finish_phase(
    phase: &str,
    model: &ModelGraph,
    validation: Option<&Dataset>,
    floor: Option<f64>,
    records: Vec<IterationRecord>,
    observe: Observer,
) -> Result<PhaseOutcome> {
    let validation_accuracy = validation.map(|v| evaluate(model, v)).transpose()?;
    let below_floor = matches!((validation_accuracy, floor), (Some(a), Some(f)) if a < f);
    observe(&PipelineEvent::Phase {
        phase: phase.to_string(),
        validation_accuracy,
        below_floor,
    });
    Ok(PhaseOutcome {
        records,
        validation_accuracy,
        below_floor,
    })
}

/// ADMM under cardinality constraints `(layer, alpha)`, then hard pruning.
/// Layers whose alpha covers every weight are left unconstrained. Returns
/// masks of the surviving weights.
#[allow(clippy::too_many_arguments)]
pub fn prune_phase(
    model: &mut ModelGraph,
    targets: &[(usize, usize)],
    train: &Dataset,
    validation: Option<&Dataset>,
    config: &AdmmConfig,
    seed: u64,
    floor: Option<f64>,
    observe: Observer,
) -> Result<(Masks, PhaseOutcome)> {
    let mut constraints = Vec::new();
    for &(layer, alpha) in targets {
        if model.params(layer).is_none() {
            return Err(invalid(format!("layer {layer} has no weights")));
        }
        if alpha < model.weight(layer).len() {
            constraints.push(LayerConstraint {
                layer,
                constraint: ConstraintSet::Cardinality { alpha },
                mask: None,
            });
        }
    }
    let mut records = Vec::new();
    if !constraints.is_empty() {
        let mut state = admm_init(model, constraints, config)?;
        let mut rng = stream_rng(seed, STREAM_PRUNE);
        records = admm_run(model, &mut state, train, validation, config, "prune", &mut rng, &mut |r| {
            observe(&PipelineEvent::Iteration(r.clone()))
        })?;
        admm_finalize(model, &state)?;
    }
    let masks = Masks::from_nonzeros(model);
    let outcome = finish_phase("prune", model, validation, floor, records, observe)?;
    Ok((masks, outcome))
}

/// Fine-tunes with masked positions frozen. With validation data, the best
/// epoch (the starting model included) is kept.
#[allow(clippy::too_many_arguments)]
pub fn masked_retrain(
    model: &mut ModelGraph,
    masks: &Masks,
    train: &Dataset,
    validation: Option<&Dataset>,
    epochs: usize,
    config: &TrainConfig,
    adam: AdamConfig,
    seed: u64,
    observe: Observer,
) -> Result<Option<f64>> {
    if epochs == 0 {
        return validation.map(|v| evaluate(model, v)).transpose();
    }
    let mut rng = stream_rng(seed, STREAM_RETRAIN);
    let mut state = AdamState::new(model, adam);
    let mut best = match validation {
        Some(v) => Some((evaluate(model, v)?, model.clone())),
        None => None,
    };
    for epoch in 1..=epochs {
        let loss = train_epoch(model, &mut state, train, config, &mut rng, &CrossEntropy, Some(masks))?;
        let acc = validation.map(|v| evaluate(model, v)).transpose()?;
        observe(&PipelineEvent::Retrain {
            epoch,
            loss,
            validation_accuracy: acc,
        });
        if let (Some(a), Some((best_acc, best_model))) = (acc, best.as_mut()) {
            if a > *best_acc {
                *best_acc = a;
                *best_model = model.clone();
            }
        }
    }
    Ok(match best {
        Some((acc, m)) => {
            *model = m;
            Some(acc)
        }
        None => None,
    })
}

fn surviving(weight: &Tensor, mask: Option<&Tensor>) -> Vec<f64> {
    match mask {
        Some(m) => weight
            .data()
            .iter()
            .zip(m.data())
            .filter(|(_, &k)| k != 0.0)
            .map(|(&w, _)| w)
            .collect(),
        None => weight.data().to_vec(),
    }
}

/// Interval for `weights` at `bits`, rounded to the nearest `f32` so the
/// stored model reproduces it exactly. No weights gives `q = 1`.
pub fn layer_quantizer(weights: &[f64], bits: u8) -> Result<Quantizer> {
    let nonzero: Vec<f64> = weights.iter().copied().filter(|&w| w != 0.0).collect();
    if nonzero.is_empty() {
        return Quantizer::new(1.0, bits);
    }
    let fit = fit_interval(&nonzero, bits)?;
    let q = fit.interval as f32 as f64;
    Quantizer::new(if q > 0.0 { q } else { f32::MIN_POSITIVE as f64 }, bits)
}

/// Smallest `n ≤ 8` with `E(q) ≤ tolerance · ‖w‖²`, else 8.
pub fn auto_bits(weights: &[f64], tolerance: f64) -> Result<u8> {
    let energy: f64 = weights.iter().map(|w| w * w).sum();
    for n in 1..=8u8 {
        let quant = layer_quantizer(weights, n)?;
        let nonzero: Vec<f64> = weights.iter().copied().filter(|&w| w != 0.0).collect();
        if quantization_error(&nonzero, &quant) <= tolerance * energy {
            return Ok(n);
        }
    }
    Ok(8)
}

/// ADMM under quantization constraints on the surviving weights, then hard
/// quantization. `bits` gives `(layer, n)` for each layer to quantize.
#[allow(clippy::too_many_arguments)]
pub fn quantize_phase(
    model: &mut ModelGraph,
    masks: &Masks,
    bits: &[(usize, u8)],
    train: &Dataset,
    validation: Option<&Dataset>,
    config: &AdmmConfig,
    seed: u64,
    floor: Option<f64>,
    observe: Observer,
) -> Result<(Vec<(usize, Quantizer)>, PhaseOutcome)> {
    let mut quantizers = Vec::new();
    let mut constraints = Vec::new();
    for &(layer, n) in bits {
        if model.params(layer).is_none() {
            return Err(invalid(format!("layer {layer} has no weights")));
        }
        if !(1..=MAX_BITS).contains(&n) {
            return Err(invalid(format!("bits {n} for layer {layer} out of range")));
        }
        let mask = masks.get(layer).cloned().unwrap_or_else(|| model.weight(layer).nonzero_mask());
        let quant = layer_quantizer(&surviving(model.weight(layer), Some(&mask)), n)?;
        quantizers.push((layer, quant));
        constraints.push(LayerConstraint {
            layer,
            constraint: ConstraintSet::Quantization(quant),
            mask: Some(mask),
        });
    }
    let mut state = admm_init(model, constraints, config)?;
    let mut rng = stream_rng(seed, STREAM_QUANTIZE);
    let records = admm_run(model, &mut state, train, validation, config, "quantize", &mut rng, &mut |r| {
        observe(&PipelineEvent::Iteration(r.clone()))
    })?;
    admm_finalize(model, &state)?;
    let outcome = finish_phase("quantize", model, validation, floor, records, observe)?;
    Ok((quantizers, outcome))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerResult {
    pub name: String,
    pub layer: usize,
    pub weights: usize,
    pub alpha: usize,
    pub nonzeros: usize,
    pub bits: u8,
    pub interval: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressionResult {
    pub model: ModelGraph,
    /// Snapshot after pruning and masked retraining, before quantization.
    pub retrained: ModelGraph,
    pub layers: Vec<LayerResult>,
    pub masks: Masks,
    pub baseline_accuracy: Option<f64>,
    pub pruned_accuracy: Option<f64>,
    pub retrained_accuracy: Option<f64>,
    pub final_accuracy: Option<f64>,
    pub flagged_phases: Vec<String>,
    pub log: Vec<IterationRecord>,
}

impl CompressionResult {
    pub fn quantizers(&self) -> Vec<(usize, Quantizer)> {
        self.layers
            .iter()
            .map(|l| (l.layer, Quantizer { interval: l.interval, bits: l.bits }))
            .collect()
    }

    /// Exact joint-constraint check: at most `alpha` nonzeros per layer and
    /// every nonzero on a level of that layer's quantizer.
    pub fn validate_joint(&self) -> Result<()> {
        for l in &self.layers {
            let w = self.model.weight(l.layer);
            let nz = w.count_nonzero();
            if nz > l.alpha || nz != l.nonzeros {
                return Err(invalid(format!(
                    "{} has {nz} nonzeros, alpha {} (recorded {})",
                    l.name, l.alpha, l.nonzeros
                )));
            }
            let quant = Quantizer::new(l.interval, l.bits)?;
            if let Some((i, v)) = w
                .data()
                .iter()
                .enumerate()
                .find(|(_, &v)| v != 0.0 && quant.level_of(v).is_none())
            {
                return Err(invalid(format!("{} weight {i} = {v} is not a level", l.name)));
            }
        }
        Ok(())
    }

    pub fn encode(&self, index_bits: IndexBits) -> Result<CompressedModel> {
        encode(&self.model, &self.quantizers(), index_bits)
    }
}

/// Runs prune, masked retrain and quantize for `plan`. Accuracies are on
/// `validation` when given.
pub fn compress(
    model: &ModelGraph,
    plan: &CompressionPlan,
    train: &Dataset,
    validation: Option<&Dataset>,
    config: &PipelineConfig,
    observe: Observer,
) -> Result<CompressionResult> {
    plan.validate(model)?;
    let mut model = model.clone();
    let baseline_accuracy = validation.map(|v| evaluate(&model, v)).transpose()?;
    let floor = config.accuracy_floor;

    let (masks, pruned) = prune_phase(
        &mut model,
        &plan.alphas(),
        train,
        validation,
        &config.prune,
        config.seed,
        floor,
        observe,
    )?;
    let retrained_accuracy = masked_retrain(
        &mut model,
        &masks,
        train,
        validation,
        config.retrain_epochs,
        &config.retrain,
        config.retrain_adam,
        config.seed,
        observe,
    )?;

    let retrained = model.clone();

    let mut bits = Vec::new();
    for l in &plan.layers {
        let n = match l.bits {
            Some(n) => n,
            None => auto_bits(
                &surviving(model.weight(l.layer), masks.get(l.layer)),
                config.auto_bits_tolerance,
            )?,
        };
        bits.push((l.layer, n));
    }
    let (quantizers, quantized) = quantize_phase(
        &mut model,
        &masks,
        &bits,
        train,
        validation,
        &config.quantize,
        config.seed,
        floor,
        observe,
    )?;

    let layers = plan
        .layers
        .iter()
        .zip(&quantizers)
        .map(|(l, (_, q))| LayerResult {
            name: l.name.clone(),
            layer: l.layer,
            weights: l.weights,
            alpha: l.alpha,
            nonzeros: model.weight(l.layer).count_nonzero(),
            bits: q.bits,
            interval: q.interval,
        })
        .collect();
    let mut flagged_phases = Vec::new();
    if pruned.below_floor {
        flagged_phases.push("prune".to_string());
    }
    if quantized.below_floor {
        flagged_phases.push("quantize".to_string());
    }
    let mut log = pruned.records;
    log.extend(quantized.records);
    let result = CompressionResult {
        model,
        retrained,
        layers,
        masks,
        baseline_accuracy,
        pruned_accuracy: pruned.validation_accuracy,
        retrained_accuracy,
        final_accuracy: quantized.validation_accuracy,
        flagged_phases,
        log,
    };
    result.validate_joint()?;
    Ok(result)
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportLayer {
    pub name: String,
    pub params: usize,
    pub nonzeros: usize,
    /// `params / nonzeros`.
    pub ratio: f64,
    pub n_bits: u8,
    pub q: f64,
    pub index_bits: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Accuracies {
    pub baseline_validation: Option<f64>,
    pub pruned_validation: Option<f64>,
    pub retrained_validation: Option<f64>,
    pub final_validation: Option<f64>,
    pub baseline_test: Option<f64>,
    pub retrained_test: Option<f64>,
    pub final_test: Option<f64>,
}

/// JSON report of a compression run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub schema_version: u32,
    pub seed: u64,
    pub layers: Vec<ReportLayer>,
    pub accuracy: Accuracies,
    pub flagged_phases: Vec<String>,
    pub sizes: SizeReport,
    pub cost: CostReport,
}

impl CompressionReport {
    pub fn new(
        result: &CompressionResult,
        stored: &CompressedModel,
        seed: u64,
        baseline_test: Option<f64>,
        retrained_test: Option<f64>,
        final_test: Option<f64>,
    ) -> Result<Self> {
        let bits: Vec<(usize, u32)> = result.layers.iter().map(|l| (l.layer, l.bits as u32)).collect();
        Ok(Self {
            schema_version: REPORT_SCHEMA_VERSION,
            seed,
            layers: result
                .layers
                .iter()
                .zip(&stored.layers)
                .map(|(l, s)| ReportLayer {
                    name: l.name.clone(),
                    params: l.weights,
                    nonzeros: l.nonzeros,
                    ratio: l.weights as f64 / l.nonzeros.max(1) as f64,
                    n_bits: l.bits,
                    q: l.interval,
                    index_bits: s.index_bits,
                })
                .collect(),
            accuracy: Accuracies {
                baseline_validation: result.baseline_accuracy,
                pruned_validation: result.pruned_accuracy,
                retrained_validation: result.retrained_accuracy,
                final_validation: result.final_accuracy,
                baseline_test,
                retrained_test,
                final_test,
            },
            flagged_phases: result.flagged_phases.clone(),
            sizes: size_report(stored),
            cost: model_cost_report(&result.model, &bits)?,
        })
    }
}

/// Planner accuracy oracle: a shortened prune phase from the pretrained
/// model at the probed targets, optionally followed by masked retraining,
/// scored on validation data. Every probe uses the same seed.
pub struct PruneProbe<'a> {
    pub model: &'a ModelGraph,
    pub train: &'a Dataset,
    pub validation: &'a Dataset,
    pub admm: AdmmConfig,
    pub retrain_epochs: usize,
    pub retrain: TrainConfig,
    pub retrain_adam: AdamConfig,
    pub seed: u64,
    pub observe: Option<ProbeObserver<'a>>,
}

impl AccuracyProbe for PruneProbe<'_> {
    fn accuracy(&mut self, alphas: &[(usize, usize)]) -> Result<f64> {
        let mut model = self.model.clone();
        let seed = self.seed ^ STREAM_PROBE.rotate_left(32);
        let (masks, _) = prune_phase(
            &mut model,
            alphas,
            self.train,
            None,
            &self.admm,
            seed,
            None,
            &mut |_| {},
        )?;
        masked_retrain(
            &mut model,
            &masks,
            self.train,
            None,
            self.retrain_epochs,
            &self.retrain,
            self.retrain_adam,
            seed,
            &mut |_| {},
        )?;
        let acc = evaluate(&model, self.validation)?;
        if let Some(f) = self.observe.as_mut() {
            f(alphas, acc);
        }
        Ok(acc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantizer_interval_is_f32() {
        let q = layer_quantizer(&[0.1, -0.37, 0.52, 0.0], 3).unwrap();
        assert_eq!(q.interval as f32 as f64, q.interval);
        assert_eq!(layer_quantizer(&[0.0, 0.0], 2).unwrap().interval, 1.0);
    }

    #[test]
    fn auto_bits_grows_with_spread() {
        assert_eq!(auto_bits(&[0.5, -0.5, 0.5], 0.01).unwrap(), 1);
        let w: Vec<f64> = (1..=200).map(|i| i as f64 / 200.0).collect();
        let n = auto_bits(&w, 0.01).unwrap();
        assert!(n > 1 && n <= 8);
        assert!(auto_bits(&w, 1e-6).unwrap() >= n);
    }

    #[test]
    fn event_lines_are_key_value() {
        let e = PipelineEvent::Retrain {
            epoch: 2,
            loss: 0.5,
            validation_accuracy: Some(0.98),
        };
        assert_eq!(e.to_string(), "phase=retrain epoch=2 loss=0.500000 val_acc=0.9800");
    }
}
