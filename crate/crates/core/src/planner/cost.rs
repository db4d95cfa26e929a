use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::nn::{LayerSpec, ModelGraph};

/// Compute cost of one weighted layer. `operations` counts a MAC as two
/// operations (one multiply, one add).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer: usize,
    pub macs: u64,
    pub operations: u64,
    pub weights: u64,
}

/// MACs of a conv or fully-connected layer for one input sample of shape
/// `input` (per-sample, e.g. `[C, H, W]`).
pub fn layer_macs(layer: usize, spec: &LayerSpec, input: &[usize]) -> Result<LayerCost> {
    let macs = match *spec {
        LayerSpec::Conv2d(c) => {
            let out = spec.output_shape(input)?;
            (out[1] * out[2] * c.out_channels * c.kernel_h * c.kernel_w * c.group_in()) as u64
        }
        LayerSpec::Dense { inputs, outputs } => {
            spec.output_shape(input)?;
            (inputs * outputs) as u64
        }
        _ => {
            return Err(invalid(format!(
                "no MAC count for a {} layer",
                spec.kind_name()
            )))
        }
    };
    let weights = spec.weight_shape().map_or(0, |s| s.iter().product::<usize>()) as u64;
    Ok(LayerCost {
        layer,
        macs,
        operations: 2 * macs,
        weights,
    })
}

/// Costs of every weighted layer of `model`, in layer order.
pub fn model_costs(model: &ModelGraph) -> Result<Vec<LayerCost>> {
    let shapes = model.layer_input_shapes();
    model
        .prunable_layers()
        .into_iter()
        .map(|i| layer_macs(i, &model.layers[i].spec, &shapes[i]))
        .collect()
}

/// How a layer is stored: surviving weights and bits per weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerUsage {
    pub layer: usize,
    pub nonzeros: u64,
    pub bits: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub layer: usize,
    pub name: String,
    pub operations: u64,
    pub density: f64,
    /// `operations · density`.
    pub pruned_operations: f64,
    pub bits: u32,
    /// `pruned_operations · bits`.
    pub operations_bits: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub layers: Vec<CostRow>,
    pub total_operations: u64,
    pub total_pruned_operations: f64,
    pub total_operations_bits: f64,
}

/// Pruned operation counts and the operations × bits energy proxy.
/// `names` is aligned with `costs`.
pub fn cost_report(costs: &[LayerCost], names: &[String], usage: &[LayerUsage]) -> Result<CostReport> {
    if names.len() != costs.len() {
        return Err(invalid("one name per layer cost required"));
    }
    let mut layers = Vec::with_capacity(costs.len());
    for (cost, name) in costs.iter().zip(names) {
        let u = usage
            .iter()
            .find(|u| u.layer == cost.layer)
            .ok_or_else(|| invalid(format!("no usage for layer {}", cost.layer)))?;
        if u.nonzeros > cost.weights {
            return Err(invalid(format!(
                "layer {} has {} nonzeros but only {} weights",
                cost.layer, u.nonzeros, cost.weights
            )));
        }
        let density = if cost.weights == 0 {
            0.0
        } else {
            u.nonzeros as f64 / cost.weights as f64
        };
        let pruned = cost.operations as f64 * density;
        layers.push(CostRow {
            layer: cost.layer,
            name: name.clone(),
            operations: cost.operations,
            density,
            pruned_operations: pruned,
            bits: u.bits,
            operations_bits: pruned * u.bits as f64,
        });
    }
    Ok(CostReport {
        total_operations: layers.iter().map(|r| r.operations).sum(),
        total_pruned_operations: layers.iter().map(|r| r.pruned_operations).sum(),
        total_operations_bits: layers.iter().map(|r| r.operations_bits).sum(),
        layers,
    })
}

/// Cost report for a model as it stands: densities from its nonzeros,
/// `bits` per weighted layer (32 where absent).
pub fn model_cost_report(model: &ModelGraph, bits: &[(usize, u32)]) -> Result<CostReport> {
    let costs = model_costs(model)?;
    let names: Vec<String> = costs.iter().map(|c| model.layers[c.layer].name.clone()).collect();
    let usage: Vec<LayerUsage> = costs
        .iter()
        .map(|c| LayerUsage {
            layer: c.layer,
            nonzeros: model.weight(c.layer).count_nonzero() as u64,
            bits: bits.iter().find(|b| b.0 == c.layer).map_or(32, |b| b.1),
        })
        .collect();
    cost_report(&costs, &names, &usage)
}
