//! MNIST IDX ingestion, batching and accuracy evaluation.

use std::fs;
use std::path::Path;

use crate::error::{invalid, IdxError, Result};
use crate::nn::ModelGraph;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// Number of trailing training images held out for validation.
pub const VALIDATION_SIZE: usize = 5_000;

const NUM_CLASSES: u8 = 10;

/// Images scaled to `[0, 1]` with shape `[count, 1, rows, cols]`, plus labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<u8>) -> Result<Self> {
        if images.shape().first() != Some(&labels.len()) {
            return Err(IdxError::CountMismatch {
                images: images.shape().first().copied().unwrap_or(0),
                labels: labels.len(),
            }
            .into());
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape, e.g. `[1, 28, 28]`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    /// Gathers the given samples into a batch tensor.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<u8>) {
        let len = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * len..(i + 1) * len]);
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        (Tensor::new(shape, data).expect("batch shape"), labels)
    }

    /// Contiguous range `[start, end)` as a new dataset.
    pub fn slice(&self, start: usize, end: usize) -> Dataset {
        let idx: Vec<usize> = (start..end).collect();
        let (images, labels) = self.batch(&idx);
        Dataset { images, labels }
    }

    /// Splits off the last `tail` samples: returns `(head, tail)`.
    pub fn split_tail(&self, tail: usize) -> Result<(Dataset, Dataset)> {
        if tail == 0 || tail >= self.len() {
            return Err(invalid(format!(
                "cannot hold out {tail} of {} samples",
                self.len()
            )));
        }
        let cut = self.len() - tail;
        Ok((self.slice(0, cut), self.slice(cut, self.len())))
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn check_len(bytes: &[u8], expected: usize) -> std::result::Result<(), IdxError> {
    if bytes.len() < expected {
        return Err(IdxError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    Ok(())
}

/// Parses an IDX3 image file. Pixel byte `v` maps to `v / 255`.
pub fn parse_idx_images(bytes: &[u8]) -> std::result::Result<Tensor, IdxError> {
    check_len(bytes, 16)?;
    let magic = be_u32(bytes, 0);
    if magic != IDX_IMAGES_MAGIC {
        return Err(IdxError::BadMagic {
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(bytes, 4) as usize;
    let rows = be_u32(bytes, 8) as usize;
    let cols = be_u32(bytes, 12) as usize;
    let expected = 16 + count * rows * cols;
    check_len(bytes, expected)?;
    let data = bytes[16..expected]
        .iter()
        .map(|&v| f64::from(v) / 255.0)
        .collect();
    if expected == 16 {
        return Ok(Tensor::zeros(&[count, 1, rows, cols]));
    }
    Ok(Tensor::new(vec![count, 1, rows, cols], data).expect("length checked above"))
}

/// Parses an IDX1 label file.
pub fn parse_idx_labels(bytes: &[u8]) -> std::result::Result<Vec<u8>, IdxError> {
    check_len(bytes, 8)?;
    let magic = be_u32(bytes, 0);
    if magic != IDX_LABELS_MAGIC {
        return Err(IdxError::BadMagic {
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(bytes, 4) as usize;
    check_len(bytes, 8 + count)?;
    let labels = bytes[8..8 + count].to_vec();
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= NUM_CLASSES) {
        return Err(IdxError::LabelOutOfRange { index, label });
    }
    Ok(labels)
}

/// Serializes images back to IDX3 bytes (pixels rounded to the nearest byte).
pub fn encode_idx_images(images: &Tensor) -> Vec<u8> {
    let shape = images.shape();
    let mut out = Vec::with_capacity(16 + images.len());
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for &d in [shape[0], shape[2], shape[3]].iter() {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend(images.data().iter().map(|&v| (v * 255.0).round() as u8));
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images = parse_idx_images(&fs::read(images_path)?)?;
    let labels = parse_idx_labels(&fs::read(labels_path)?)?;
    let n_images = images.shape()[0];
    if n_images != labels.len() {
        return Err(IdxError::CountMismatch {
            images: n_images,
            labels: labels.len(),
        }
        .into());
    }
    Dataset::new(images, labels)
}

/// Train (first 55k), validation (last 5k of train) and test splits.
#[derive(Debug, Clone)]
pub struct MnistSplits {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

/// Loads the four standard MNIST files from `dir`.
pub fn load_mnist_dir(dir: impl AsRef<Path>) -> Result<MnistSplits> {
    let dir = dir.as_ref();
    let full = load_idx(dir.join(TRAIN_IMAGES), dir.join(TRAIN_LABELS))?;
    let test = load_idx(dir.join(TEST_IMAGES), dir.join(TEST_LABELS))?;
    let (train, validation) = full.split_tail(VALIDATION_SIZE)?;
    Ok(MnistSplits {
        train,
        validation,
        test,
    })
}

/// Fraction of samples whose argmax prediction equals the label.
pub fn evaluate(model: &ModelGraph, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(invalid("cannot evaluate on an empty dataset"));
    }
    evaluate_with(dataset, |batch| model.predict(batch))
}

/// Accuracy for any batch predictor (used for compressed-model inference too).
pub fn evaluate_with(
    dataset: &Dataset,
    mut predict: impl FnMut(&Tensor) -> Result<Vec<usize>>,
) -> Result<f64> {
    const CHUNK: usize = 500;
    let mut correct = 0usize;
    let mut start = 0;
    while start < dataset.len() {
        let end = (start + CHUNK).min(dataset.len());
        let idx: Vec<usize> = (start..end).collect();
        let (batch, labels) = dataset.batch(&idx);
        let preds = predict(&batch)?;
        correct += preds
            .iter()
            .zip(&labels)
            .filter(|(&p, &l)| p == l as usize)
            .count();
        start = end;
    }
    Ok(correct as f64 / dataset.len() as f64)
}
