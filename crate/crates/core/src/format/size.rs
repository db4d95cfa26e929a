use serde::{Deserialize, Serialize};

use super::CompressedModel;

/// Storage of one weighted layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSize {
    pub layer: usize,
    pub weights: u64,
    pub nonzeros: u64,
    /// Bits per stored weight.
    pub bits: u32,
    /// Bits per relative index, 0 for dense storage.
    pub index_bits: u32,
    /// Stored records, fillers included.
    pub records: u64,
    pub header_bits: u64,
}

impl LayerSize {
    /// A dense layer of `weights` reals at 32 bits, no index.
    pub fn dense(layer: usize, weights: u64) -> Self {
        Self {
            layer,
            weights,
            nonzeros: weights,
            bits: 32,
            index_bits: 0,
            records: weights,
            header_bits: 0,
        }
    }

    pub fn data_bits(&self) -> u64 {
        self.nonzeros * self.bits as u64
    }

    pub fn total_bits(&self) -> u64 {
        self.records * (self.bits + self.index_bits) as u64 + self.header_bits
    }

    pub fn dense_bits(&self) -> u64 {
        self.weights * 32
    }
}

/// Data size (stored weights only) and total size (records plus per-layer
/// headers), against 32-bit dense weights. Biases and byte padding are not
/// counted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeReport {
    pub layers: Vec<LayerSize>,
    pub data_bits: u64,
    pub total_bits: u64,
    pub dense_bits: u64,
    /// `dense_bits / data_bits`; an empty model counts as one bit.
    pub data_ratio: f64,
    pub total_ratio: f64,
}

impl SizeReport {
    pub fn from_layers(layers: Vec<LayerSize>) -> Self {
        let data_bits = layers.iter().map(LayerSize::data_bits).sum();
        let total_bits = layers.iter().map(LayerSize::total_bits).sum();
        let dense_bits = layers.iter().map(LayerSize::dense_bits).sum();
        let ratio = |bits: u64| dense_bits as f64 / bits.max(1) as f64;
        Self {
            data_ratio: ratio(data_bits),
            total_ratio: ratio(total_bits),
            layers,
            data_bits,
            total_bits,
            dense_bits,
        }
    }
}

/// Header bytes per layer: id, rank, dims, n, b, q, record and nonzero counts.
fn header_bits(rank: usize) -> u64 {
    8 * (4 + 1 + 4 * rank as u64 + 1 + 1 + 4 + 4 + 4)
}

pub fn size_report(cm: &CompressedModel) -> SizeReport {
    SizeReport::from_layers(
        cm.layers
            .iter()
            .map(|l| LayerSize {
                layer: l.layer,
                weights: l.weight_count() as u64,
                nonzeros: l.nonzeros as u64,
                bits: l.bits as u32,
                index_bits: l.index_bits as u32,
                records: l.records as u64,
                header_bits: header_bits(l.shape.len()),
            })
            .collect(),
    )
}
