use std::path::PathBuf;

use prunq::data::{evaluate, evaluate_with, load_idx, load_mnist_dir, Dataset, TEST_IMAGES, TEST_LABELS};
use prunq::nn::{Layer, LayerParams, LayerSpec, ModelGraph};
use prunq::Tensor;

fn balanced(count: usize) -> Dataset {
    let images = Tensor::from_fn(&[count, 1, 2, 2], |i| (i % 7) as f64 / 7.0);
    Dataset::new(images, (0..count).map(|i| (i % 10) as u8).collect()).unwrap()
}

#[test]
fn oracle_predictor_scores_one() {
    let data = balanced(1234);
    let mut offset = 0;
    let acc = evaluate_with(&data, |batch| {
        let n = batch.shape()[0];
        let preds = (offset..offset + n).map(|i| data.labels[i] as usize).collect();
        offset += n;
        Ok(preds)
    })
    .unwrap();
    assert_eq!(acc, 1.0);
}

#[test]
fn constant_logits_score_chance() {
    // All-zero weights and biases: every class ties and argmax picks class 0.
    let model = ModelGraph::from_layers(
        &[1, 2, 2],
        vec![
            Layer {
                name: "fc1".into(),
                spec: LayerSpec::dense(4, 10),
                params: Some(LayerParams {
                    weight: Tensor::zeros(&[10, 4]),
                    bias: Tensor::zeros(&[10]),
                }),
            },
            Layer {
                name: "loss".into(),
                spec: LayerSpec::SoftmaxLoss,
                params: None,
            },
        ],
    )
    .unwrap();
    assert_eq!(evaluate(&model, &balanced(1000)).unwrap(), 0.1);
}

fn mnist_dir() -> PathBuf {
    std::env::var_os("PRUNQ_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

#[test]
fn official_mnist_files_load_with_standard_sizes() {
    let dir = mnist_dir();
    if !dir.join(TEST_IMAGES).exists() {
        eprintln!("skipping: no MNIST files under {}", dir.display());
        return;
    }
    let test = load_idx(dir.join(TEST_IMAGES), dir.join(TEST_LABELS)).unwrap();
    assert_eq!(test.len(), 10_000);
    assert_eq!(test.sample_shape(), &[1, 28, 28]);
    let splits = load_mnist_dir(&dir).unwrap();
    assert_eq!(splits.train.len(), 55_000);
    assert_eq!(splits.validation.len(), 5_000);
    assert_eq!(splits.test.len(), 10_000);
    assert!(splits.test.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
}
