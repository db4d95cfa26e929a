//! "ADNN" checkpoint container.
//!
//! ```text
//! magic    "ADNN"
//! version  u16 (= 1)
//! input    u8 rank, rank × u32 dims
//! layers   u32 count, then per layer:
//!            u8 kind (0 fc, 1 conv, 2 max-pool, 3 relu, 4 softmax-loss)
//!            kind fields as u32 (fc: in, out; conv: in, out, kh, kw, stride,
//!            padding, groups; pool: size, stride)
//!            weighted layers: weight tensor, bias tensor
//! tensor   u8 rank, rank × u32 dims, product(dims) × f64
//! ```
//! All integers and reals are little-endian.

use std::fs;
use std::path::Path;

use super::layer::{Conv2d, LayerSpec};
use super::model::{Layer, LayerParams, ModelGraph};
use crate::bytes::{put_f64, put_u16, put_u32, put_u8, to_u32, Reader};
use crate::error::{FormatError, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ADNN";
pub const CHECKPOINT_VERSION: u16 = 1;

pub(crate) fn write_shape(out: &mut Vec<u8>, shape: &[usize]) -> Result<()> {
    put_u8(out, shape.len() as u8);
    for &d in shape {
        put_u32(out, to_u32(d, "dimension")?);
    }
    Ok(())
}

pub(crate) fn read_shape(r: &mut Reader) -> std::result::Result<Vec<usize>, FormatError> {
    let rank = r.u8()? as usize;
    if rank == 0 {
        return Err(FormatError::Corrupt("zero-rank shape".into()));
    }
    (0..rank).map(|_| Ok(r.u32()? as usize)).collect()
}

pub(crate) fn write_spec(out: &mut Vec<u8>, spec: &LayerSpec) -> Result<()> {
    let fields: Vec<usize> = match *spec {
        LayerSpec::Dense { inputs, outputs } => {
            put_u8(out, 0);
            vec![inputs, outputs]
        }
        LayerSpec::Conv2d(c) => {
            put_u8(out, 1);
            vec![
                c.in_channels,
                c.out_channels,
                c.kernel_h,
                c.kernel_w,
                c.stride,
                c.padding,
                c.groups,
            ]
        }
        LayerSpec::MaxPool { size, stride } => {
            put_u8(out, 2);
            vec![size, stride]
        }
        LayerSpec::Relu => {
            put_u8(out, 3);
            vec![]
        }
        LayerSpec::SoftmaxLoss => {
            put_u8(out, 4);
            vec![]
        }
    };
    for f in fields {
        put_u32(out, to_u32(f, "layer field")?);
    }
    Ok(())
}

pub(crate) fn read_spec(r: &mut Reader) -> std::result::Result<LayerSpec, FormatError> {
    let kind = r.u8()?;
    let mut f = |n: usize| -> std::result::Result<Vec<usize>, FormatError> {
        (0..n).map(|_| Ok(r.u32()? as usize)).collect()
    };
    Ok(match kind {
        0 => {
            let v = f(2)?;
            LayerSpec::Dense {
                inputs: v[0],
                outputs: v[1],
            }
        }
        1 => {
            let v = f(7)?;
            LayerSpec::Conv2d(Conv2d {
                in_channels: v[0],
                out_channels: v[1],
                kernel_h: v[2],
                kernel_w: v[3],
                stride: v[4],
                padding: v[5],
                groups: v[6],
            })
        }
        2 => {
            let v = f(2)?;
            LayerSpec::MaxPool {
                size: v[0],
                stride: v[1],
            }
        }
        3 => LayerSpec::Relu,
        4 => LayerSpec::SoftmaxLoss,
        k => return Err(FormatError::Corrupt(format!("unknown layer kind {k}"))),
    })
}

fn write_tensor(out: &mut Vec<u8>, t: &Tensor) -> Result<()> {
    write_shape(out, t.shape())?;
    for &v in t.data() {
        put_f64(out, v);
    }
    Ok(())
}

fn read_tensor(r: &mut Reader) -> Result<Tensor> {
    let shape = read_shape(r)?;
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| FormatError::Corrupt("tensor size overflow".into()))?;
    let bytes = r.take(n.checked_mul(8).ok_or(FormatError::UnexpectedEof)?)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data)
}

/// Serializes architecture and parameters. Round-trips bit-exactly.
pub fn to_bytes(model: &ModelGraph) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u16(&mut out, CHECKPOINT_VERSION);
    write_shape(&mut out, model.input_shape())?;
    put_u32(&mut out, to_u32(model.layers.len(), "layer count")?);
    for layer in &model.layers {
        write_spec(&mut out, &layer.spec)?;
        if let Some(p) = &layer.params {
            write_tensor(&mut out, &p.weight)?;
            write_tensor(&mut out, &p.bias)?;
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelGraph> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(FormatError::UnsupportedVersion(version).into());
    }
    let input_shape = read_shape(&mut r)?;
    let count = r.u32()? as usize;
    let mut specs = Vec::new();
    let mut layers = Vec::new();
    for _ in 0..count {
        let spec = read_spec(&mut r)?;
        let params = if spec.has_weights() {
            Some(LayerParams {
                weight: read_tensor(&mut r)?,
                bias: read_tensor(&mut r)?,
            })
        } else {
            None
        };
        specs.push(spec);
        layers.push((spec, params));
    }
    if !r.is_empty() {
        return Err(FormatError::Corrupt("trailing bytes after checkpoint".into()).into());
    }
    let names = layer_names(&specs);
    let layers = layers
        .into_iter()
        .zip(names)
        .map(|((spec, params), name)| Layer { name, spec, params })
        .collect();
    ModelGraph::from_layers(&input_shape, layers)
}

/// Canonical names: `conv1, conv2, …` for convolutions, `fc1, …` for dense layers.
pub(crate) fn layer_names(specs: &[LayerSpec]) -> Vec<String> {
    let (mut n_conv, mut n_fc) = (0, 0);
    specs
        .iter()
        .enumerate()
        .map(|(i, s)| match s {
            LayerSpec::Conv2d(_) => {
                n_conv += 1;
                format!("conv{n_conv}")
            }
            LayerSpec::Dense { .. } => {
                n_fc += 1;
                format!("fc{n_fc}")
            }
            other => format!("{}{i}", other.kind_name()),
        })
        .collect()
}

pub fn save(model: &ModelGraph, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(model)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ModelGraph> {
    from_bytes(&fs::read(path)?)
}
