use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};

/// Hyperparameters of a 2-D convolution. Weights are laid out as
/// `[out_channels, in_channels / groups, kernel_h, kernel_w]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2d {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    /// Input channels seen by each output channel.
    pub fn group_in(&self) -> usize {
        self.in_channels / self.groups
    }

    pub fn group_out(&self) -> usize {
        self.out_channels / self.groups
    }

    /// Length of one im2col column: `(C_in / groups) * K_h * K_w`.
    pub fn patch_len(&self) -> usize {
        self.group_in() * self.kernel_h * self.kernel_w
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < self.kernel_h || pw < self.kernel_w {
            return Err(shape_err(format!(
                "conv kernel {}x{} larger than padded input {ph}x{pw}",
                self.kernel_h, self.kernel_w
            )));
        }
        Ok((
            (ph - self.kernel_h) / self.stride + 1,
            (pw - self.kernel_w) / self.stride + 1,
        ))
    }

    fn validate(&self) -> Result<()> {
        if self.in_channels == 0
            || self.out_channels == 0
            || self.kernel_h == 0
            || self.kernel_w == 0
        {
            return Err(invalid("conv2d dimensions must be positive"));
        }
        if self.stride == 0 {
            return Err(invalid("conv2d stride must be >= 1"));
        }
        if self.groups == 0
            || !self.in_channels.is_multiple_of(self.groups)
            || !self.out_channels.is_multiple_of(self.groups)
        {
            return Err(invalid(format!(
                "conv2d channels {}->{} not divisible by groups {}",
                self.in_channels, self.out_channels, self.groups
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Fully connected; flattens whatever per-sample shape it receives.
    Dense { inputs: usize, outputs: usize },
    Conv2d(Conv2d),
    MaxPool { size: usize, stride: usize },
    Relu,
    /// Marks the network output; identity in the forward pass, the loss
    /// (softmax cross-entropy) is applied by the training objective.
    SoftmaxLoss,
}

impl LayerSpec {
    pub fn dense(inputs: usize, outputs: usize) -> Self {
        LayerSpec::Dense { inputs, outputs }
    }

    pub fn max_pool(size: usize, stride: usize) -> Self {
        LayerSpec::MaxPool { size, stride }
    }

    pub fn has_weights(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d(_))
    }

    pub fn is_conv(&self) -> bool {
        matches!(self, LayerSpec::Conv2d(_))
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "fc",
            LayerSpec::Conv2d(_) => "conv",
            LayerSpec::MaxPool { .. } => "pool",
            LayerSpec::Relu => "relu",
            LayerSpec::SoftmaxLoss => "softmax_loss",
        }
    }

    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => Some(vec![outputs, inputs]),
            LayerSpec::Conv2d(c) => Some(vec![
                c.out_channels,
                c.group_in(),
                c.kernel_h,
                c.kernel_w,
            ]),
            _ => None,
        }
    }

    pub fn bias_len(&self) -> Option<usize> {
        match *self {
            LayerSpec::Dense { outputs, .. } => Some(outputs),
            LayerSpec::Conv2d(c) => Some(c.out_channels),
            _ => None,
        }
    }

    /// Fan-in used for Kaiming initialization.
    pub fn fan_in(&self) -> Option<usize> {
        match *self {
            LayerSpec::Dense { inputs, .. } => Some(inputs),
            LayerSpec::Conv2d(c) => Some(c.patch_len()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => {
                if inputs == 0 || outputs == 0 {
                    return Err(invalid("dense layer sizes must be positive"));
                }
                Ok(())
            }
            LayerSpec::Conv2d(c) => c.validate(),
            LayerSpec::MaxPool { size, stride } => {
                if size == 0 || stride == 0 {
                    return Err(invalid("max-pool size and stride must be >= 1"));
                }
                Ok(())
            }
            LayerSpec::Relu | LayerSpec::SoftmaxLoss => Ok(()),
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => {
                let n: usize = input.iter().product();
                if n != inputs {
                    return Err(shape_err(format!(
                        "dense layer expects {inputs} inputs, got shape {input:?}"
                    )));
                }
                Ok(vec![outputs])
            }
            LayerSpec::Conv2d(c) => {
                let [ch, h, w] = chw(input)?;
                if ch != c.in_channels {
                    return Err(shape_err(format!(
                        "conv expects {} input channels, got {ch}",
                        c.in_channels
                    )));
                }
                let (oh, ow) = c.output_hw(h, w)?;
                Ok(vec![c.out_channels, oh, ow])
            }
            LayerSpec::MaxPool { size, stride } => {
                let [ch, h, w] = chw(input)?;
                if h < size || w < size {
                    return Err(shape_err(format!(
                        "pool window {size} larger than input {h}x{w}"
                    )));
                }
                Ok(vec![ch, (h - size) / stride + 1, (w - size) / stride + 1])
            }
            LayerSpec::Relu | LayerSpec::SoftmaxLoss => Ok(input.to_vec()),
        }
    }
}

pub(crate) fn chw(shape: &[usize]) -> Result<[usize; 3]> {
    match shape {
        &[c, h, w] => Ok([c, h, w]),
        _ => Err(shape_err(format!(
            "expected a [channels, height, width] input, got {shape:?}"
        ))),
    }
}
