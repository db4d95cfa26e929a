//! Sparse quantized model storage: relative-index record streams, the
//! "ADNC" container, size accounting and inference on stored levels.
//!
//! Each weighted layer keeps its nonzero weights as level indices `k` with
//! one interval `q`. Weights are visited in flat row-major order and every
//! nonzero emits a record `(gap, code)`: `gap` (b bits) counts the zeros
//! skipped since the previous nonzero, `code` (n bits) is the level. A gap
//! of `2^b − 1` or more is split with filler records whose gap field is
//! exactly `2^b − 1`; a filler skips that many positions and carries code 0.

mod bits;
mod container;
mod size;

pub use bits::{BitReader, BitWriter};
pub use container::{from_bytes, load, save, to_bytes, ADNC_MAGIC, ADNC_VERSION};
pub use size::{size_report, LayerSize, SizeReport};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, FormatError, Result};
use crate::nn::checkpoint::layer_names;
use crate::nn::{forward_layer, Layer, LayerParams, LayerSpec, ModelGraph};
use crate::projection::{Quantizer, MAX_BITS};
use crate::tensor::Tensor;

/// Index width for the relative-index records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IndexBits {
    /// Per layer, the `b ∈ [1, 16]` minimising `records · (n + b)`.
    Auto,
    Fixed(u8),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedLayer {
    /// Index into the model's layer list.
    pub layer: usize,
    pub shape: Vec<usize>,
    /// Level bits `n`.
    pub bits: u8,
    pub interval: f32,
    /// Gap bits `b`.
    pub index_bits: u8,
    pub nonzeros: u32,
    pub records: u32,
    /// Packed records, LSB-first, zero-padded to a byte.
    pub stream: Vec<u8>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedModel {
    pub input_shape: Vec<usize>,
    pub specs: Vec<LayerSpec>,
    /// One entry per weighted layer, in layer order.
    pub layers: Vec<CompressedLayer>,
}

/// Code of level `k` for `n`-bit levels: `−M/2..−1, 1..M/2` map to `0..M` in order.
pub fn level_code(k: i64, bits: u8) -> u32 {
    let half = 1i64 << (bits - 1);
    debug_assert!(k != 0 && k.abs() <= half);
    (if k < 0 { k + half } else { k + half - 1 }) as u32
}

pub fn code_level(code: u32, bits: u8) -> i64 {
    let half = 1i64 << (bits - 1);
    let c = code as i64;
    if c < half {
        c - half
    } else {
        c - half + 1
    }
}

fn filler_gap(index_bits: u8) -> usize {
    (1usize << index_bits) - 1
}

/// Records needed for the given gaps at `b` index bits.
pub fn record_count(gaps: &[usize], index_bits: u8) -> u64 {
    let f = filler_gap(index_bits);
    gaps.iter().map(|&g| (g / f) as u64 + 1).sum()
}

/// The `b ∈ [1, 16]` minimising `records · (n + b)`; ties go to the smaller `b`.
pub fn best_index_bits(gaps: &[usize], bits: u8) -> u8 {
    (1..=MAX_BITS)
        .min_by_key(|&b| (record_count(gaps, b) * (bits as u64 + b as u64), b))
        .unwrap()
}

fn gaps_of(positions: &[usize]) -> Vec<usize> {
    let mut prev = 0;
    positions
        .iter()
        .map(|&p| {
            let g = p - prev;
            prev = p + 1;
            g
        })
        .collect()
}

/// Encodes one layer's weights. Every nonzero must be a level of
/// `quantizer`, whose interval must be exactly representable as `f32`.
pub fn encode_layer(
    layer: usize,
    weights: &Tensor,
    bias: &[f64],
    quantizer: &Quantizer,
    index_bits: IndexBits,
) -> Result<CompressedLayer> {
    let q32 = quantizer.interval as f32;
    if q32 as f64 != quantizer.interval {
        return Err(invalid(format!(
            "interval {} of layer {layer} is not representable as f32",
            quantizer.interval
        )));
    }
    let n = quantizer.bits;
    let mut positions = Vec::new();
    let mut codes = Vec::new();
    for (i, &w) in weights.data().iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let k = quantizer.level_of(w).ok_or(FormatError::Unquantized {
            layer,
            index: i,
            value: w,
        })?;
        positions.push(i);
        codes.push(level_code(k, n));
    }
    let gaps = gaps_of(&positions);
    let b = match index_bits {
        IndexBits::Auto => best_index_bits(&gaps, n),
        IndexBits::Fixed(b) if (1..=MAX_BITS).contains(&b) => b,
        IndexBits::Fixed(b) => return Err(invalid(format!("index bits {b} outside 1..=16"))),
    };
    let filler = filler_gap(b);
    let mut out = BitWriter::new();
    let mut records = 0u64;
    for (&g, &code) in gaps.iter().zip(&codes) {
        for _ in 0..g / filler {
            out.write(filler as u32, b);
            out.write(0, n);
            records += 1;
        }
        out.write((g % filler) as u32, b);
        out.write(code, n);
        records += 1;
    }
    let to_u32 = |v: u64, what: &str| {
        u32::try_from(v).map_err(|_| FormatError::Corrupt(format!("{what} {v} exceeds u32")))
    };
    Ok(CompressedLayer {
        layer,
        shape: weights.shape().to_vec(),
        bits: n,
        interval: q32,
        index_bits: b,
        nonzeros: to_u32(positions.len() as u64, "nonzero count")?,
        records: to_u32(records, "record count")?,
        stream: out.finish(),
        bias: bias.to_vec(),
    })
}

impl CompressedLayer {
    pub fn weight_count(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn quantizer(&self) -> Result<Quantizer> {
        Quantizer::new(self.interval as f64, self.bits)
    }

    /// `(flat position, level)` of every stored weight.
    pub fn levels(&self) -> std::result::Result<Vec<(usize, i64)>, FormatError> {
        let (n, b) = (self.bits, self.index_bits);
        if !(1..=MAX_BITS).contains(&n) || !(1..=MAX_BITS).contains(&b) {
            return Err(FormatError::Corrupt(format!("bit widths n={n} b={b}")));
        }
        let record_bits = self.records as usize * (n as usize + b as usize);
        if self.stream.len() != record_bits.div_ceil(8) {
            return Err(FormatError::Corrupt(format!(
                "layer {} stream is {} bytes, {} records need {}",
                self.layer,
                self.stream.len(),
                self.records,
                record_bits.div_ceil(8)
            )));
        }
        let len = self.weight_count();
        let filler = filler_gap(b);
        let mut r = BitReader::new(&self.stream);
        let mut out = Vec::with_capacity(self.nonzeros as usize);
        let mut pos = 0usize;
        for _ in 0..self.records {
            let gap = r.read(b)? as usize;
            let code = r.read(n)?;
            pos += gap;
            if gap == filler {
                if pos > len {
                    return Err(FormatError::Corrupt(format!("layer {} filler overruns shape", self.layer)));
                }
                continue;
            }
            if pos >= len {
                return Err(FormatError::Corrupt(format!(
                    "layer {} record at position {pos} overruns {len} weights",
                    self.layer
                )));
            }
            out.push((pos, code_level(code, n)));
            pos += 1;
        }
        if out.len() != self.nonzeros as usize {
            return Err(FormatError::Corrupt(format!(
                "layer {} decoded {} weights, header says {}",
                self.layer,
                out.len(),
                self.nonzeros
            )));
        }
        if !r.rest_is_zero() {
            return Err(FormatError::Corrupt(format!("layer {} padding is not zero", self.layer)));
        }
        Ok(out)
    }

    /// Dense weights `k·q`, zero where pruned.
    pub fn decode(&self) -> Result<Tensor> {
        let q = self.interval as f64;
        let mut w = Tensor::zeros(&self.shape);
        for (pos, k) in self.levels()? {
            w.data_mut()[pos] = k as f64 * q;
        }
        Ok(w)
    }

    /// Dense tensor of the integer levels themselves.
    fn level_tensor(&self) -> Result<Tensor> {
        let mut w = Tensor::zeros(&self.shape);
        for (pos, k) in self.levels()? {
            w.data_mut()[pos] = k as f64;
        }
        Ok(w)
    }
}

/// Encodes every weighted layer of `model`. `quantizers` holds one
/// `(layer index, quantizer)` per weighted layer.
pub fn encode(
    model: &ModelGraph,
    quantizers: &[(usize, Quantizer)],
    index_bits: IndexBits,
) -> Result<CompressedModel> {
    let prunable = model.prunable_layers();
    if quantizers.len() != prunable.len() || quantizers.iter().zip(&prunable).any(|(q, &i)| q.0 != i) {
        return Err(invalid("need one quantizer per weighted layer, in layer order"));
    }
    let layers = quantizers
        .iter()
        .map(|(i, quant)| {
            let p = model.params(*i).expect("weighted layer");
            encode_layer(*i, &p.weight, p.bias.data(), quant, index_bits)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CompressedModel {
        input_shape: model.input_shape().to_vec(),
        specs: model.layers.iter().map(|l| l.spec).collect(),
        layers,
    })
}

impl CompressedModel {
    /// Checks that layers line up with the architecture's weighted layers.
    pub fn validate(&self) -> Result<()> {
        let weighted: Vec<usize> = (0..self.specs.len()).filter(|&i| self.specs[i].has_weights()).collect();
        if weighted.len() != self.layers.len() {
            return Err(FormatError::Corrupt(format!(
                "{} weighted layers but {} stored",
                weighted.len(),
                self.layers.len()
            ))
            .into());
        }
        for (l, &i) in self.layers.iter().zip(&weighted) {
            let spec = &self.specs[i];
            if l.layer != i
                || Some(&l.shape) != spec.weight_shape().as_ref()
                || Some(l.bias.len()) != spec.bias_len()
            {
                return Err(FormatError::Corrupt(format!("stored layer {} does not match layer {i}", l.layer)).into());
            }
        }
        Ok(())
    }

    /// Rebuilds the dense model with decoded weights.
    pub fn decode(&self) -> Result<ModelGraph> {
        self.validate()?;
        let names = layer_names(&self.specs);
        let mut stored = self.layers.iter();
        let layers = self
            .specs
            .iter()
            .zip(names)
            .map(|(spec, name)| {
                let params = if spec.has_weights() {
                    let l = stored.next().expect("validated");
                    Some(LayerParams {
                        weight: l.decode()?,
                        bias: Tensor::new(vec![l.bias.len()], l.bias.clone())?,
                    })
                } else {
                    None
                };
                Ok(Layer {
                    name,
                    spec: *spec,
                    params,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        ModelGraph::from_layers(&self.input_shape, layers)
    }

    pub fn weight_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight_count()).sum()
    }

    pub fn nonzero_count(&self) -> usize {
        self.layers.iter().map(|l| l.nonzeros as usize).sum()
    }
}

/// Logits computed on the stored integer levels: each weighted layer runs
/// with weights `k` and no bias, then its outputs are scaled by `q` and
/// the bias is added.
pub fn infer_compressed(cm: &CompressedModel, batch: &Tensor) -> Result<Tensor> {
    cm.validate()?;
    let shape = batch.shape();
    if shape.len() != cm.input_shape.len() + 1 || shape[1..] != cm.input_shape[..] {
        return Err(shape_err(format!(
            "batch shape {shape:?} does not match model input {:?}",
            cm.input_shape
        )));
    }
    let n = shape[0];
    let mut x = batch.data().to_vec();
    let mut sample = cm.input_shape.clone();
    let mut stored = cm.layers.iter();
    for spec in &cm.specs {
        let out_shape = spec.output_shape(&sample)?;
        if spec.has_weights() {
            let l = stored.next().expect("validated");
            let params = LayerParams {
                weight: l.level_tensor()?,
                bias: Tensor::zeros(&[l.bias.len()]),
            };
            let mut y = forward_layer(spec, Some(&params), &sample, n, &x);
            let q = l.interval as f64;
            let channels = out_shape[0];
            let per_channel: usize = out_shape[1..].iter().product();
            for (i, v) in y.iter_mut().enumerate() {
                *v = *v * q + l.bias[i / per_channel % channels];
            }
            x = y;
        } else {
            x = forward_layer(spec, None, &sample, n, &x);
        }
        sample = out_shape;
    }
    Tensor::new(vec![n, sample[0]], x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quant(q: f64, bits: u8) -> Quantizer {
        Quantizer::new(q, bits).unwrap()
    }

    #[test]
    fn codes_enumerate_levels_in_order() {
        let codes: Vec<u32> = [-4, -3, -2, -1, 1, 2, 3, 4].iter().map(|&k| level_code(k, 3)).collect();
        assert_eq!(codes, (0..8).collect::<Vec<_>>());
        for bits in 1..=16u8 {
            let half = 1i64 << (bits - 1);
            for k in [-half, -1, 1, half] {
                assert_eq!(code_level(level_code(k, bits), bits), k);
            }
        }
    }

    #[test]
    fn two_weights_two_apart() {
        let w = Tensor::new(vec![4], vec![0.5, 0.0, 0.0, 0.5]).unwrap();
        let l = encode_layer(0, &w, &[], &quant(0.5, 2), IndexBits::Fixed(2)).unwrap();
        assert_eq!((l.records, l.nonzeros), (2, 2));
        let mut r = BitReader::new(&l.stream);
        let mut gaps = Vec::new();
        for _ in 0..2 {
            gaps.push(r.read(2).unwrap());
            assert_eq!(code_level(r.read(2).unwrap(), 2), 1);
        }
        assert_eq!(gaps, vec![0, 2]);
        assert_eq!(l.decode().unwrap(), w);
    }

    #[test]
    fn dense_layer_has_zero_gaps() {
        let w = Tensor::new(vec![2, 3], vec![1.0, -1.0, 2.0, -2.0, 1.0, 1.0]).unwrap();
        for b in 1..=8 {
            let l = encode_layer(0, &w, &[], &quant(1.0, 2), IndexBits::Fixed(b)).unwrap();
            assert_eq!(l.records, 6);
            let mut r = BitReader::new(&l.stream);
            for _ in 0..6 {
                assert_eq!(r.read(b).unwrap(), 0);
                r.read(2).unwrap();
            }
        }
    }

    #[test]
    fn long_gap_uses_fillers() {
        let mut data = vec![0.0; 20];
        data[19] = 0.25;
        let w = Tensor::new(vec![20], data).unwrap();
        let l = encode_layer(0, &w, &[], &quant(0.25, 1), IndexBits::Fixed(2)).unwrap();
        // 19 = 6 fillers of 3, then a record with gap 1.
        assert_eq!(l.records, 7);
        assert_eq!(l.decode().unwrap(), w);
    }

    #[test]
    fn empty_and_single_layers() {
        let z = Tensor::zeros(&[3, 3]);
        let l = encode_layer(0, &z, &[], &quant(1.0, 3), IndexBits::Auto).unwrap();
        assert_eq!((l.records, l.nonzeros, l.stream.len()), (0, 0, 0));
        assert_eq!(l.decode().unwrap(), z);

        let mut one = CompressedLayer {
            layer: 0,
            shape: vec![4],
            bits: 2,
            interval: 0.5,
            index_bits: 3,
            nonzeros: 1,
            records: 1,
            stream: Vec::new(),
            bias: vec![],
        };
        let mut w = BitWriter::new();
        w.write(0, 3);
        w.write(level_code(1, 2), 2);
        one.stream = w.finish();
        assert_eq!(one.decode().unwrap().data(), &[0.5, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn unquantized_weight_rejected() {
        let w = Tensor::new(vec![3], vec![0.5, 0.0, 0.3]).unwrap();
        let err = encode_layer(2, &w, &[], &quant(0.5, 2), IndexBits::Auto).unwrap_err();
        assert!(matches!(
            err,
            crate::Error::Format(FormatError::Unquantized { layer: 2, index: 2, .. })
        ));
        assert!(encode_layer(0, &w, &[], &quant(0.1, 2), IndexBits::Auto).is_err());
    }

    #[test]
    fn overrun_is_corrupt() {
        let mut w = BitWriter::new();
        w.write(4, 3);
        w.write(0, 2);
        let l = CompressedLayer {
            layer: 0,
            shape: vec![4],
            bits: 2,
            interval: 1.0,
            index_bits: 3,
            nonzeros: 1,
            records: 1,
            stream: w.finish(),
            bias: vec![],
        };
        assert!(matches!(l.levels(), Err(FormatError::Corrupt(_))));
    }
}
