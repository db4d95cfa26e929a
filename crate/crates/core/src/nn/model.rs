use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::checkpoint::layer_names;
use super::kernels::{self, ConvGeometry};
use super::layer::{chw, Conv2d, LayerSpec};
use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LayerParams {
    fn zeros_like(&self) -> Self {
        Self {
            weight: Tensor::zeros(self.weight.shape()),
            bias: Tensor::zeros(self.bias.shape()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub spec: LayerSpec,
    pub params: Option<LayerParams>,
}

/// Per-layer gradients, aligned with `ModelGraph::layers`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Option<LayerParams>>);

impl Gradients {
    pub fn zeros_like(model: &ModelGraph) -> Self {
        Gradients(
            model
                .layers
                .iter()
                .map(|l| l.params.as_ref().map(LayerParams::zeros_like))
                .collect(),
        )
    }

    pub fn layer(&self, idx: usize) -> Option<&LayerParams> {
        self.0.get(idx).and_then(Option::as_ref)
    }

    pub fn layer_mut(&mut self, idx: usize) -> Option<&mut LayerParams> {
        self.0.get_mut(idx).and_then(Option::as_mut)
    }
}

/// Binary weight masks (1 = trainable/surviving, 0 = frozen at its value).
/// Entries are aligned with `ModelGraph::layers`; `None` means unmasked.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Masks(pub Vec<Option<Tensor>>);

impl Masks {
    pub fn none(model: &ModelGraph) -> Self {
        Masks(vec![None; model.layers.len()])
    }

    /// Masks marking every nonzero weight of every weighted layer.
    pub fn from_nonzeros(model: &ModelGraph) -> Self {
        Masks(
            model
                .layers
                .iter()
                .map(|l| l.params.as_ref().map(|p| p.weight.nonzero_mask()))
                .collect(),
        )
    }

    pub fn get(&self, idx: usize) -> Option<&Tensor> {
        self.0.get(idx).and_then(Option::as_ref)
    }
}

/// Ordered feed-forward network with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
}

enum Cache {
    Conv { geom: ConvGeometry, cols: Vec<f64> },
    Dense { input: Vec<f64> },
    Pool { in_len: usize, argmax: Vec<usize> },
    Relu { output: Vec<f64> },
    Identity,
}

impl ModelGraph {
    /// Builds a model with Kaiming-uniform weights and zero biases.
    pub fn new(input_shape: &[usize], specs: &[LayerSpec], rng: &mut dyn RngCore) -> Result<Self> {
        let mut layers = Vec::with_capacity(specs.len());
        for (spec, name) in specs.iter().zip(layer_names(specs)) {
            spec.validate()?;
            let params = spec.weight_shape().map(|shape| {
                let bound = (6.0 / spec.fan_in().unwrap() as f64).sqrt();
                let weight = Tensor::from_fn(&shape, |_| rng.random_range(-bound..bound));
                LayerParams {
                    weight,
                    bias: Tensor::zeros(&[spec.bias_len().unwrap()]),
                }
            });
            layers.push(Layer {
                name,
                spec: *spec,
                params,
            });
        }
        Self::from_layers(input_shape, layers)
    }

    /// Assembles a model from explicit layers, validating shapes.
    pub fn from_layers(input_shape: &[usize], layers: Vec<Layer>) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(invalid(format!("bad input shape {input_shape:?}")));
        }
        let model = Self {
            input_shape: input_shape.to_vec(),
            layers,
        };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<()> {
        let mut shape = self.input_shape.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            layer.spec.validate()?;
            match (&layer.params, layer.spec.weight_shape()) {
                (Some(p), Some(ws)) => {
                    if p.weight.shape() != ws.as_slice() {
                        return Err(shape_err(format!(
                            "layer {i} weight {:?}, expected {ws:?}",
                            p.weight.shape()
                        )));
                    }
                    if p.bias.shape() != [layer.spec.bias_len().unwrap()] {
                        return Err(shape_err(format!("layer {i} bias {:?}", p.bias.shape())));
                    }
                }
                (None, None) => {}
                _ => {
                    return Err(shape_err(format!(
                        "layer {i} ({}) params presence does not match its kind",
                        layer.name
                    )))
                }
            }
            if matches!(layer.spec, LayerSpec::SoftmaxLoss) && i + 1 != self.layers.len() {
                return Err(invalid("softmax-loss must be the last layer"));
            }
            shape = layer.spec.output_shape(&shape)?;
        }
        if shape.len() != 1 {
            return Err(shape_err(format!(
                "network output must be a class vector, got {shape:?}"
            )));
        }
        Ok(())
    }

    /// The 20/50-filter LeNet-5 variant: two conv + pool stages and two FC layers.
    pub fn lenet5(rng: &mut dyn RngCore) -> Self {
        Self::new(&[1, 28, 28], &lenet5_specs(), rng).expect("lenet5 specs are valid")
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    /// Per-sample input shape seen by each layer.
    pub fn layer_input_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut shape = self.input_shape.clone();
        for layer in &self.layers {
            let next = layer.spec.output_shape(&shape).expect("validated");
            shapes.push(std::mem::replace(&mut shape, next));
        }
        shapes
    }

    pub fn num_classes(&self) -> usize {
        let mut shape = self.input_shape.clone();
        for layer in &self.layers {
            shape = layer.spec.output_shape(&shape).expect("validated");
        }
        shape[0]
    }

    /// Indices of layers carrying weights; these are the prunable layers.
    pub fn prunable_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.params.is_some())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn params(&self, idx: usize) -> Option<&LayerParams> {
        self.layers.get(idx).and_then(|l| l.params.as_ref())
    }

    pub fn params_mut(&mut self, idx: usize) -> Option<&mut LayerParams> {
        self.layers.get_mut(idx).and_then(|l| l.params.as_mut())
    }

    pub fn weight(&self, idx: usize) -> &Tensor {
        &self.params(idx).expect("layer has weights").weight
    }

    pub fn weight_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.params_mut(idx).expect("layer has weights").weight
    }

    pub fn weight_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(|l| l.params.as_ref())
            .map(|p| p.weight.len())
            .sum()
    }

    pub fn nonzero_weight_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(|l| l.params.as_ref())
            .map(|p| p.weight.count_nonzero())
            .sum()
    }

    fn check_batch(&self, batch: &Tensor) -> Result<usize> {
        let shape = batch.shape();
        if shape.len() != self.input_shape.len() + 1 || shape[1..] != self.input_shape[..] {
            return Err(shape_err(format!(
                "batch shape {shape:?} does not match model input {:?}",
                self.input_shape
            )));
        }
        Ok(shape[0])
    }

    /// Logits of shape `[batch, classes]`.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let n = self.check_batch(batch)?;
        let mut x = batch.data().to_vec();
        let mut shape = self.input_shape.clone();
        for layer in &self.layers {
            x = forward_layer(&layer.spec, layer.params.as_ref(), &shape, n, &x);
            shape = layer.spec.output_shape(&shape)?;
        }
        Tensor::new(vec![n, shape[0]], x)
    }

    /// Mean softmax cross-entropy and its gradient for every parameter.
    pub fn loss_and_grads(&self, batch: &Tensor, labels: &[u8]) -> Result<(f64, Gradients)> {
        let n = self.check_batch(batch)?;
        if labels.len() != n {
            return Err(shape_err(format!("{} labels for batch of {n}", labels.len())));
        }
        let classes = self.num_classes();
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(invalid(format!("label {bad} outside [0, {classes})")));
        }

        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = batch.data().to_vec();
        let mut shape = self.input_shape.clone();
        for layer in &self.layers {
            let (y, cache) = forward_train(&layer.spec, layer.params.as_ref(), &shape, n, x);
            caches.push(cache);
            x = y;
            shape = layer.spec.output_shape(&shape)?;
        }

        let (loss, mut dy) = kernels::softmax_cross_entropy(&x, classes, labels);
        if !loss.is_finite() {
            return Err(Error::Divergence {
                iteration: 0,
                loss,
            });
        }

        let mut grads = Gradients::zeros_like(self);
        for (i, (layer, cache)) in self.layers.iter().zip(caches).enumerate().rev() {
            let want_dx = i > 0;
            dy = match cache {
                Cache::Identity => dy,
                Cache::Relu { output } => {
                    for (g, &o) in dy.iter_mut().zip(&output) {
                        if o <= 0.0 {
                            *g = 0.0;
                        }
                    }
                    dy
                }
                Cache::Pool { in_len, argmax } => {
                    kernels::max_pool_backward(in_len * n, &argmax, &dy)
                }
                Cache::Dense { input } => {
                    let LayerSpec::Dense { inputs, outputs } = layer.spec else {
                        unreachable!()
                    };
                    let p = layer.params.as_ref().unwrap();
                    let g = grads.layer_mut(i).unwrap();
                    kernels::dense_backward(
                        n,
                        inputs,
                        outputs,
                        &input,
                        p.weight.data(),
                        &dy,
                        g.weight.data_mut(),
                        g.bias.data_mut(),
                        want_dx,
                    )
                    .unwrap_or_default()
                }
                Cache::Conv { geom, cols } => {
                    let p = layer.params.as_ref().unwrap();
                    let g = grads.layer_mut(i).unwrap();
                    geom.backward(
                        n,
                        &cols,
                        p.weight.data(),
                        &dy,
                        g.weight.data_mut(),
                        g.bias.data_mut(),
                        want_dx,
                    )
                    .unwrap_or_default()
                }
            };
        }
        Ok((loss, grads))
    }

    /// Argmax class per sample; ties go to the lowest class index.
    pub fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        let logits = self.forward(batch)?;
        let classes = logits.shape()[1];
        Ok(logits.data().chunks(classes).map(argmax).collect())
    }
}

pub fn lenet5_specs() -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv2d(Conv2d::new(1, 20, 5)),
        LayerSpec::Relu,
        LayerSpec::max_pool(2, 2),
        LayerSpec::Conv2d(Conv2d::new(20, 50, 5)),
        LayerSpec::Relu,
        LayerSpec::max_pool(2, 2),
        LayerSpec::dense(800, 500),
        LayerSpec::Relu,
        LayerSpec::dense(500, 10),
        LayerSpec::SoftmaxLoss,
    ]
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Inference for one layer over a batch of `n` samples with per-sample
/// input shape `shape`.
pub fn forward_layer(
    spec: &LayerSpec,
    params: Option<&LayerParams>,
    shape: &[usize],
    n: usize,
    x: &[f64],
) -> Vec<f64> {
    match *spec {
        LayerSpec::Dense { inputs, outputs } => {
            let p = params.expect("dense layer has params");
            kernels::dense_forward(n, inputs, outputs, x, p.weight.data(), p.bias.data())
        }
        LayerSpec::Conv2d(conv) => {
            let p = params.expect("conv layer has params");
            let [_, h, w] = chw(shape).expect("validated");
            ConvGeometry::new(conv, h, w)
                .forward(n, x, p.weight.data(), p.bias.data(), false)
                .0
        }
        LayerSpec::MaxPool { size, stride } => {
            kernels::max_pool_forward(n, chw(shape).expect("validated"), size, stride, x).0
        }
        LayerSpec::Relu => x.iter().map(|&v| v.max(0.0)).collect(),
        LayerSpec::SoftmaxLoss => x.to_vec(),
    }
}

fn forward_train(
    spec: &LayerSpec,
    params: Option<&LayerParams>,
    shape: &[usize],
    n: usize,
    x: Vec<f64>,
) -> (Vec<f64>, Cache) {
    match *spec {
        LayerSpec::Dense { inputs, outputs } => {
            let p = params.expect("dense layer has params");
            let y = kernels::dense_forward(n, inputs, outputs, &x, p.weight.data(), p.bias.data());
            (y, Cache::Dense { input: x })
        }
        LayerSpec::Conv2d(conv) => {
            let p = params.expect("conv layer has params");
            let [_, h, w] = chw(shape).expect("validated");
            let geom = ConvGeometry::new(conv, h, w);
            let (y, cols) = geom.forward(n, &x, p.weight.data(), p.bias.data(), true);
            (
                y,
                Cache::Conv {
                    geom,
                    cols: cols.unwrap(),
                },
            )
        }
        LayerSpec::MaxPool { size, stride } => {
            let dims = chw(shape).expect("validated");
            let (y, argmax) = kernels::max_pool_forward(n, dims, size, stride, &x);
            (
                y,
                Cache::Pool {
                    in_len: dims.iter().product(),
                    argmax,
                },
            )
        }
        LayerSpec::Relu => {
            let y: Vec<f64> = x.iter().map(|&v| v.max(0.0)).collect();
            (y.clone(), Cache::Relu { output: y })
        }
        LayerSpec::SoftmaxLoss => (x, Cache::Identity),
    }
}
