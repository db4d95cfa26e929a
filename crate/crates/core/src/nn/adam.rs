use serde::{Deserialize, Serialize};

use super::model::{Gradients, Masks, ModelGraph};
use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment estimates for every parameter of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: Gradients,
    v: Gradients,
}

impl AdamState {
    pub fn new(model: &ModelGraph, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Gradients::zeros_like(model),
            v: Gradients::zeros_like(model),
        }
    }

    /// One ADAM update. Weights whose mask entry is 0 are left bit-identical,
    /// together with their moment estimates. Biases are never masked.
    pub fn step(
        &mut self,
        model: &mut ModelGraph,
        grads: &Gradients,
        masks: Option<&Masks>,
    ) -> Result<()> {
        if grads.0.len() != model.layers.len() || self.m.0.len() != model.layers.len() {
            return Err(shape_err("gradients/moments do not match the model"));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for idx in 0..model.layers.len() {
            let Some(params) = model.params_mut(idx) else {
                continue;
            };
            let g = grads
                .layer(idx)
                .ok_or_else(|| shape_err(format!("missing gradient for layer {idx}")))?;
            let m = self.m.layer_mut(idx).unwrap();
            let v = self.v.layer_mut(idx).unwrap();
            let mask = masks.and_then(|ms| ms.get(idx));
            if let Some(mask) = mask {
                mask.ensure_same_shape(&params.weight, "mask")?;
                if mask.data().iter().any(|&x| x != 0.0 && x != 1.0) {
                    return Err(invalid("mask entries must be 0 or 1"));
                }
            }
            update(&mut params.weight, &g.weight, &mut m.weight, &mut v.weight, mask, c, bc1, bc2)?;
            update(&mut params.bias, &g.bias, &mut m.bias, &mut v.bias, None, c, bc1, bc2)?;
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn update(
    param: &mut Tensor,
    grad: &Tensor,
    m: &mut Tensor,
    v: &mut Tensor,
    mask: Option<&Tensor>,
    c: AdamConfig,
    bc1: f64,
    bc2: f64,
) -> Result<()> {
    grad.ensure_same_shape(param, "gradient")?;
    let p = param.data_mut();
    let (m, v) = (m.data_mut(), v.data_mut());
    for i in 0..p.len() {
        if mask.is_some_and(|mk| mk.data()[i] == 0.0) {
            continue;
        }
        let g = grad.data()[i];
        m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
        v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
    }
    Ok(())
}
