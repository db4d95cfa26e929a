use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::cost::model_costs;
use super::profile::{break_even_ratio, PlatformProfile};
use crate::error::{invalid, Error, Result};
use crate::nn::ModelGraph;

pub const PLAN_SCHEMA_VERSION: u32 = 1;

/// Feasible iff `reference − accuracy ≤ max_drop`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyConstraint {
    pub reference: f64,
    pub max_drop: f64,
}

impl AccuracyConstraint {
    pub fn admits(&self, accuracy: f64) -> bool {
        self.reference - accuracy <= self.max_drop
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanLayer {
    pub name: String,
    /// Index into the model's layer list.
    pub layer: usize,
    /// `"conv"` or `"fc"`.
    pub kind: String,
    pub weights: usize,
    /// Maximum surviving weights; equals `weights` when restored.
    pub alpha: usize,
    #[serde(default)]
    pub restored: bool,
    /// Quantization bit width; `null` asks the pipeline to search for one.
    pub bits: Option<u8>,
}

impl PlanLayer {
    pub fn ratio(&self) -> f64 {
        self.weights as f64 / self.alpha as f64
    }
}

/// Per-layer pruning targets and bit widths.
///
/// ```json
/// {
///   "schema_version": 1,
///   "profile": "sample-55",
///   "break_even_ratio": 2.2222,
///   "fc_ratio": 4.0,
///   "accuracy": {"reference": 0.991, "max_drop": 0.01},
///   "layers": [
///     {"name": "conv1", "layer": 0, "kind": "conv", "weights": 500,
///      "alpha": 500, "restored": true, "bits": 4}
///   ]
/// }
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionPlan {
    pub schema_version: u32,
    #[serde(default)]
    pub profile: Option<String>,
    #[serde(default)]
    pub break_even_ratio: Option<f64>,
    #[serde(default)]
    pub fc_ratio: Option<f64>,
    #[serde(default)]
    pub accuracy: Option<AccuracyConstraint>,
    pub layers: Vec<PlanLayer>,
}

impl CompressionPlan {
    /// Plan from explicit per-layer targets keyed by layer name. Layers
    /// without an entry stay dense; bits default by layer kind.
    pub fn from_targets(
        model: &ModelGraph,
        alphas: &BTreeMap<String, usize>,
        bits: &BTreeMap<String, u8>,
        conv_bits: Option<u8>,
        fc_bits: Option<u8>,
    ) -> Result<Self> {
        let names: Vec<&str> = model.layers.iter().map(|l| l.name.as_str()).collect();
        for key in alphas.keys().chain(bits.keys()) {
            let ok = model
                .prunable_layers()
                .iter()
                .any(|&i| names[i] == key.as_str());
            if !ok {
                return Err(invalid(format!("no weighted layer named {key:?}")));
            }
        }
        let layers = model
            .prunable_layers()
            .into_iter()
            .map(|i| {
                let l = &model.layers[i];
                let weights = model.weight(i).len();
                let conv = l.spec.is_conv();
                PlanLayer {
                    name: l.name.clone(),
                    layer: i,
                    kind: l.spec.kind_name().to_string(),
                    weights,
                    alpha: alphas.get(&l.name).copied().unwrap_or(weights),
                    restored: false,
                    bits: bits
                        .get(&l.name)
                        .copied()
                        .or(if conv { conv_bits } else { fc_bits }),
                }
            })
            .collect();
        let plan = Self {
            schema_version: PLAN_SCHEMA_VERSION,
            profile: None,
            break_even_ratio: None,
            fc_ratio: None,
            accuracy: None,
            layers,
        };
        plan.validate(model)?;
        Ok(plan)
    }

    /// Checks the plan against `model`'s weighted layers.
    pub fn validate(&self, model: &ModelGraph) -> Result<()> {
        if self.schema_version != PLAN_SCHEMA_VERSION {
            return Err(invalid(format!(
                "unsupported plan schema version {}",
                self.schema_version
            )));
        }
        let prunable = model.prunable_layers();
        if self.layers.len() != prunable.len() {
            return Err(invalid(format!(
                "plan has {} layers, model has {} weighted layers",
                self.layers.len(),
                prunable.len()
            )));
        }
        for (pl, &i) in self.layers.iter().zip(&prunable) {
            let ml = &model.layers[i];
            if pl.layer != i || pl.name != ml.name || pl.weights != model.weight(i).len() {
                return Err(invalid(format!(
                    "plan layer {:?} does not match model layer {i} ({})",
                    pl.name, ml.name
                )));
            }
            if pl.alpha == 0 || pl.alpha > pl.weights {
                return Err(invalid(format!(
                    "alpha {} for {} outside [1, {}]",
                    pl.alpha, pl.name, pl.weights
                )));
            }
            if pl.restored && pl.alpha != pl.weights {
                return Err(invalid(format!("restored layer {} must be dense", pl.name)));
            }
            if let Some(b) = pl.bits {
                if !(1..=crate::projection::MAX_BITS).contains(&b) {
                    return Err(invalid(format!("bits {b} for {} out of range", pl.name)));
                }
            }
        }
        Ok(())
    }

    /// `(layer index, alpha)` for every layer.
    pub fn alphas(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| (l.layer, l.alpha)).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let plan: Self = serde_json::from_str(text)?;
        if plan.schema_version != PLAN_SCHEMA_VERSION {
            return Err(invalid(format!(
                "unsupported plan schema version {}",
                plan.schema_version
            )));
        }
        Ok(plan)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// Validation accuracy of the model pruned to the given `(layer, alpha)` targets.
pub trait AccuracyProbe {
    fn accuracy(&mut self, alphas: &[(usize, usize)]) -> Result<f64>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    /// Each round proposes removing this fraction of the active conv layers'
    /// combined alpha, split in proportion to layer compute.
    pub step_fraction: f64,
    /// Binary-search tolerance on the step scale `t`.
    pub search_tolerance: f64,
    /// Fixed pruning ratio for fully-connected layers.
    pub fc_ratio: f64,
    pub max_rounds: usize,
    pub conv_bits: Option<u8>,
    pub fc_bits: Option<u8>,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            step_fraction: 0.5,
            search_tolerance: 1.0 / 64.0,
            fc_ratio: 4.0,
            max_rounds: 16,
            conv_bits: Some(4),
            fc_bits: Some(3),
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_fraction > 0.0 && self.step_fraction <= 1.0) {
            return Err(invalid("step_fraction must be in (0, 1]"));
        }
        if !(self.search_tolerance > 0.0 && self.search_tolerance < 1.0) {
            return Err(invalid("search_tolerance must be in (0, 1)"));
        }
        if !(self.fc_ratio >= 1.0) {
            return Err(invalid("fc_ratio must be at least 1"));
        }
        if self.max_rounds == 0 {
            return Err(invalid("max_rounds must be positive"));
        }
        Ok(())
    }
}

/// A weighted layer as the planner sees it.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannerLayer {
    pub layer: usize,
    pub name: String,
    pub conv: bool,
    pub weights: usize,
    pub operations: u64,
    /// Starting alpha (conv: baseline; fc: replaced by the coordination ratio).
    pub alpha: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRound {
    pub round: usize,
    /// Proposed (pre-clamp) reduction per active conv layer.
    pub reductions: Vec<(usize, f64)>,
    /// Accepted step scale.
    pub step: f64,
    /// Alphas of all layers after the step and any restoration.
    pub alphas: Vec<(usize, usize)>,
    pub restored: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanOutcome {
    pub plan: CompressionPlan,
    pub rounds: Vec<PlanRound>,
    /// Distinct alpha vectors handed to the probe.
    pub probes: usize,
}

/// `Δα_i = s · C_i` with `s = fraction · Σα / ΣC` over the given
/// `(alpha, operations)` pairs.
pub fn propose_reductions(layers: &[(usize, u64)], fraction: f64) -> Vec<f64> {
    let total_alpha: f64 = layers.iter().map(|l| l.0 as f64).sum();
    let total_ops: f64 = layers.iter().map(|l| l.1 as f64).sum();
    if total_ops == 0.0 {
        return vec![0.0; layers.len()];
    }
    let s = fraction * total_alpha / total_ops;
    layers.iter().map(|l| s * l.1 as f64).collect()
}

/// `max(1, ⌈α − t·Δ⌉)`; never above `alpha`.
pub fn alpha_at(alpha: usize, reduction: f64, t: f64) -> usize {
    let v = (alpha as f64 - t * reduction).ceil();
    if v < 1.0 {
        1
    } else {
        (v as usize).min(alpha)
    }
}

/// Largest feasible `t ∈ [0, 1]` to within `tolerance`, assuming `t = 0`
/// is feasible and feasibility is monotone in `t`.
pub fn search_step(
    feasible: &mut dyn FnMut(f64) -> Result<bool>,
    tolerance: f64,
) -> Result<f64> {
    if feasible(1.0)? {
        return Ok(1.0);
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while hi - lo > tolerance {
        let mid = 0.5 * (lo + hi);
        if feasible(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

struct CachedProbe<'a> {
    inner: &'a mut dyn AccuracyProbe,
    seen: HashMap<Vec<usize>, f64>,
}

impl CachedProbe<'_> {
    fn accuracy(&mut self, alphas: &[(usize, usize)]) -> Result<f64> {
        let key: Vec<usize> = alphas.iter().map(|a| a.1).collect();
        if let Some(&acc) = self.seen.get(&key) {
            return Ok(acc);
        }
        let acc = self.inner.accuracy(alphas)?;
        self.seen.insert(key, acc);
        Ok(acc)
    }
}

/// Hardware-aware alpha search over abstract layers.
///
/// Each round shrinks the active conv layers' alphas along `Δα ∝ C`,
/// binary-searching the step scale against the accuracy constraint. When
/// the full step is rejected, every active conv layer whose pruning ratio
/// is below the platform's break-even ratio is restored to dense, which
/// frees accuracy margin for the rest. The search stops at a blocked round
/// that restores nothing, or after `max_rounds`. FC layers are pruned at
/// the fixed coordination ratio throughout.
pub fn plan_layers(
    layers: &[PlannerLayer],
    profile: &PlatformProfile,
    constraint: AccuracyConstraint,
    config: &PlannerConfig,
    probe: &mut dyn AccuracyProbe,
) -> Result<PlanOutcome> {
    config.validate()?;
    let break_even = break_even_ratio(profile)?;
    let mut alpha: Vec<usize> = Vec::with_capacity(layers.len());
    for l in layers {
        if l.weights == 0 {
            return Err(invalid(format!("layer {} has no weights", l.name)));
        }
        let a = if l.conv {
            l.alpha
        } else {
            (l.weights as f64 / config.fc_ratio).ceil() as usize
        };
        if a == 0 || a > l.weights {
            return Err(invalid(format!(
                "alpha {a} for {} outside [1, {}]",
                l.name, l.weights
            )));
        }
        alpha.push(a);
    }
    let mut restored = vec![false; layers.len()];
    let mut probe = CachedProbe {
        inner: probe,
        seen: HashMap::new(),
    };
    let pairs = |alpha: &[usize]| -> Vec<(usize, usize)> {
        layers.iter().zip(alpha).map(|(l, &a)| (l.layer, a)).collect()
    };

    let start = probe.accuracy(&pairs(&alpha))?;
    if !constraint.admits(start) {
        return Err(Error::Infeasible(format!(
            "accuracy {start:.4} at the starting targets misses the constraint \
             (reference {:.4}, max drop {:.4})",
            constraint.reference, constraint.max_drop
        )));
    }

    let mut rounds = Vec::new();
    for round in 1..=config.max_rounds {
        let active: Vec<usize> = (0..layers.len())
            .filter(|&i| layers[i].conv && !restored[i] && alpha[i] > 1)
            .collect();
        if active.is_empty() {
            break;
        }
        let input: Vec<(usize, u64)> = active.iter().map(|&i| (alpha[i], layers[i].operations)).collect();
        let reductions = propose_reductions(&input, config.step_fraction);
        let candidate = |t: f64| -> Vec<usize> {
            let mut a = alpha.clone();
            for (&i, &d) in active.iter().zip(&reductions) {
                a[i] = alpha_at(alpha[i], d, t);
            }
            a
        };
        let step = search_step(
            &mut |t| Ok(constraint.admits(probe.accuracy(&pairs(&candidate(t)))?)),
            config.search_tolerance,
        )?;
        let stepped = candidate(step);
        let moved = stepped != alpha;
        alpha = stepped;

        // Restoration is checked once the accuracy constraint binds; a layer
        // still shrinking at the full step may yet pass break-even.
        let blocked = step < 1.0 || !moved;
        let mut newly = Vec::new();
        if blocked {
            for &i in &active {
                if (layers[i].weights as f64 / alpha[i] as f64) < break_even {
                    restored[i] = true;
                    alpha[i] = layers[i].weights;
                    newly.push(layers[i].layer);
                }
            }
        }
        rounds.push(PlanRound {
            round,
            reductions: active.iter().map(|&i| layers[i].layer).zip(reductions).collect(),
            step,
            alphas: pairs(&alpha),
            restored: newly.clone(),
        });
        if blocked && newly.is_empty() {
            break;
        }
    }

    // Whatever the round cap left behind, no pruned conv layer may sit
    // below break-even.
    for i in 0..layers.len() {
        if layers[i].conv && !restored[i] && (layers[i].weights as f64 / alpha[i] as f64) < break_even {
            restored[i] = true;
            alpha[i] = layers[i].weights;
        }
    }

    let plan = CompressionPlan {
        schema_version: PLAN_SCHEMA_VERSION,
        profile: Some(profile.name.clone()),
        break_even_ratio: Some(break_even),
        fc_ratio: Some(config.fc_ratio),
        accuracy: Some(constraint),
        layers: layers
            .iter()
            .enumerate()
            .map(|(i, l)| PlanLayer {
                name: l.name.clone(),
                layer: l.layer,
                kind: if l.conv { "conv" } else { "fc" }.to_string(),
                weights: l.weights,
                alpha: alpha[i],
                restored: restored[i],
                bits: if l.conv { config.conv_bits } else { config.fc_bits },
            })
            .collect(),
    };
    Ok(PlanOutcome {
        plan,
        rounds,
        probes: probe.seen.len(),
    })
}

/// Plans compression for `model`. `baseline` gives starting conv alphas by
/// layer name (conv layers without an entry start dense).
pub fn plan_compression(
    model: &ModelGraph,
    baseline: &BTreeMap<String, usize>,
    profile: &PlatformProfile,
    constraint: AccuracyConstraint,
    config: &PlannerConfig,
    probe: &mut dyn AccuracyProbe,
) -> Result<PlanOutcome> {
    let costs = model_costs(model)?;
    let layers: Vec<PlannerLayer> = costs
        .iter()
        .map(|c| {
            let l = &model.layers[c.layer];
            let weights = c.weights as usize;
            PlannerLayer {
                layer: c.layer,
                name: l.name.clone(),
                conv: l.spec.is_conv(),
                weights,
                operations: c.operations,
                alpha: baseline.get(&l.name).copied().unwrap_or(weights),
            }
        })
        .collect();
    for key in baseline.keys() {
        if !layers.iter().any(|l| l.conv && &l.name == key) {
            return Err(invalid(format!("baseline alpha for unknown conv layer {key:?}")));
        }
    }
    let outcome = plan_layers(&layers, profile, constraint, config, probe)?;
    outcome.plan.validate(model)?;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reductions_follow_compute() {
        let d = propose_reductions(&[(100, 2_000), (80, 1_000)], 0.5);
        assert_eq!(d[0], 2.0 * d[1]);
        assert!((d[0] + d[1] - 90.0).abs() < 1e-9);
    }

    #[test]
    fn alpha_never_grows_or_hits_zero() {
        assert_eq!(alpha_at(10, 3.0, 0.0), 10);
        assert_eq!(alpha_at(10, 3.0, 1.0), 7);
        assert_eq!(alpha_at(10, 3.5, 1.0), 7);
        assert_eq!(alpha_at(10, 100.0, 1.0), 1);
        assert_eq!(alpha_at(10, 0.0, 1.0), 10);
    }

    #[test]
    fn search_finds_threshold() {
        let t = search_step(&mut |t| Ok(t <= 0.3), 1.0 / 64.0).unwrap();
        assert!(t <= 0.3 && 0.3 - t < 1.0 / 64.0);
        assert_eq!(search_step(&mut |_| Ok(true), 1.0 / 64.0).unwrap(), 1.0);
        assert_eq!(search_step(&mut |t| Ok(t == 0.0), 1.0 / 64.0).unwrap(), 0.0);
    }

    #[test]
    fn constraint_admits_within_drop() {
        let c = AccuracyConstraint {
            reference: 0.99,
            max_drop: 0.01,
        };
        assert!(c.admits(0.985));
        assert!(!c.admits(0.97));
    }
}
