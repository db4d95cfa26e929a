use prunq::format::{
    code_level, encode, encode_layer, from_bytes, infer_compressed, size_report, to_bytes,
    CompressedModel, IndexBits,
};
use prunq::nn::{stream_rng, Conv2d, LayerSpec, ModelGraph};
use prunq::projection::Quantizer;
use prunq::Tensor;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

/// A random tensor of levels of `quantizer`, each entry nonzero with probability `density`.
fn random_levels(rng: &mut impl Rng, shape: &[usize], quantizer: &Quantizer, density: f64) -> Tensor {
    let top = quantizer.max_level();
    Tensor::from_fn(shape, |_| {
        if rng.random_bool(density) {
            let k = rng.random_range(1..=top);
            quantizer.level_value(if rng.random_bool(0.5) { k } else { -k })
        } else {
            0.0
        }
    })
}

fn random_quantizer(rng: &mut impl Rng, max_bits: u8) -> Quantizer {
    let q = rng.random_range(1e-3f32..2.0) as f64;
    Quantizer::new(q, rng.random_range(1..=max_bits)).unwrap()
}

#[test]
fn round_trip_random_layers() {
    let mut rng = stream_rng(41, 0);
    for trial in 0..1000 {
        let rank = rng.random_range(1..=4);
        let shape: Vec<usize> = (0..rank).map(|_| rng.random_range(1..=12)).collect();
        let quant = random_quantizer(&mut rng, 8);
        let density = [0.0, 0.01, 0.1, 0.5, 0.9, 1.0][trial % 6];
        let w = random_levels(&mut rng, &shape, &quant, density);
        let b = 1 + (trial % 8) as u8;
        let layer = encode_layer(trial, &w, &[], &quant, IndexBits::Fixed(b)).unwrap();
        assert_eq!(layer.index_bits, b);
        let back = layer.decode().unwrap();
        assert_eq!(back.shape(), w.shape());
        for (x, y) in back.data().iter().zip(w.data()) {
            assert_eq!(x.to_bits(), y.to_bits(), "trial {trial}");
        }
    }
}

/// Records actually written at each fixed `b`, against the automatic choice.
#[test]
fn auto_index_bits_is_optimal() {
    let mut rng = stream_rng(43, 0);
    for trial in 0..200 {
        let len = rng.random_range(1..3000);
        let quant = random_quantizer(&mut rng, 6);
        let density = rng.random_range(0.0..1.0f64).powi(3);
        let w = random_levels(&mut rng, &[len], &quant, density);
        let auto = encode_layer(0, &w, &[], &quant, IndexBits::Auto).unwrap();
        let cost = |l: &prunq::format::CompressedLayer| l.records as u64 * (l.bits + l.index_bits) as u64;
        let best = (1..=16u8)
            .map(|b| cost(&encode_layer(0, &w, &[], &quant, IndexBits::Fixed(b)).unwrap()))
            .min()
            .unwrap();
        assert_eq!(cost(&auto), best, "trial {trial}");
    }
}

fn small_specs() -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv2d(Conv2d::new(2, 4, 3).with_padding(1)),
        LayerSpec::Relu,
        LayerSpec::max_pool(2, 2),
        LayerSpec::Conv2d(Conv2d::new(4, 6, 3).with_groups(2)),
        LayerSpec::Relu,
        LayerSpec::dense(24, 10),
        LayerSpec::Relu,
        LayerSpec::dense(10, 5),
        LayerSpec::SoftmaxLoss,
    ]
}

/// A model whose weighted layers hold random levels and random biases.
fn quantized_model(rng: &mut StdRng, specs: &[LayerSpec], input: &[usize]) -> (ModelGraph, Vec<(usize, Quantizer)>) {
    let mut model = ModelGraph::new(input, specs, rng).unwrap();
    let mut quantizers = Vec::new();
    for i in model.prunable_layers() {
        let quant = random_quantizer(rng, 5);
        let density = rng.random_range(0.05..1.0);
        let shape = model.weight(i).shape().to_vec();
        let w = random_levels(rng, &shape, &quant, density);
        let p = model.params_mut(i).unwrap();
        p.weight = w;
        for b in p.bias.data_mut() {
            *b = rng.random_range(-0.5..0.5);
        }
        quantizers.push((i, quant));
    }
    (model, quantizers)
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn model_round_trip_through_bytes() {
    let mut rng = StdRng::seed_from_u64(47);
    for _ in 0..20 {
        let (model, quantizers) = quantized_model(&mut rng, &small_specs(), &[2, 8, 8]);
        let cm = encode(&model, &quantizers, IndexBits::Auto).unwrap();
        let bytes = to_bytes(&cm).unwrap();
        assert_eq!(&bytes[..4], b"ADNC");
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, cm);
        let decoded = back.decode().unwrap();
        for i in model.prunable_layers() {
            let (a, b) = (model.params(i).unwrap(), decoded.params(i).unwrap());
            assert!(a.weight.data().iter().zip(b.weight.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
            assert_eq!(a.bias, b.bias);
        }
        assert_eq!(to_bytes(&back).unwrap(), bytes);
    }
}

#[test]
fn damaged_files_rejected() {
    let mut rng = StdRng::seed_from_u64(53);
    let (model, quantizers) = quantized_model(&mut rng, &small_specs(), &[2, 8, 8]);
    let bytes = to_bytes(&encode(&model, &quantizers, IndexBits::Auto).unwrap()).unwrap();
    assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(from_bytes(&extra).is_err());
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(from_bytes(&magic).is_err());
    let mut version = bytes;
    version[4] = 9;
    assert!(from_bytes(&version).is_err());
}

#[test]
fn compressed_inference_matches_dense() {
    let mut rng = StdRng::seed_from_u64(59);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (model, quantizers) = quantized_model(&mut rng, &small_specs(), &[2, 8, 8]);
        let cm = encode(&model, &quantizers, IndexBits::Auto).unwrap();
        let batch = Tensor::from_fn(&[rng.random_range(1..5), 2, 8, 8], |_| rng.random_range(-1.0..1.0));
        let dense = cm.decode().unwrap().forward(&batch).unwrap();
        worst = worst.max(max_abs_diff(&infer_compressed(&cm, &batch).unwrap(), &dense));
    }
    assert!(worst <= 1e-9, "{worst}");

    let (model, quantizers) = quantized_model(&mut rng, &prunq::nn::lenet5_specs(), &[1, 28, 28]);
    let cm = encode(&model, &quantizers, IndexBits::Auto).unwrap();
    let batch = Tensor::from_fn(&[3, 1, 28, 28], |_| rng.random_range(0.0..1.0));
    let d = max_abs_diff(&infer_compressed(&cm, &batch).unwrap(), &model.forward(&batch).unwrap());
    assert!(d <= 1e-9, "{d}");
}

#[test]
fn zero_batch_and_unit_interval() {
    let mut rng = StdRng::seed_from_u64(61);
    let (model, quantizers) = quantized_model(&mut rng, &small_specs(), &[2, 8, 8]);
    let cm = encode(&model, &quantizers, IndexBits::Auto).unwrap();
    let zeros = Tensor::zeros(&[2, 2, 8, 8]);
    let d = max_abs_diff(&infer_compressed(&cm, &zeros).unwrap(), &model.forward(&zeros).unwrap());
    assert!(d <= 1e-12, "{d}");

    let unit: Vec<(usize, Quantizer)> = quantizers
        .iter()
        .map(|&(i, q)| (i, Quantizer::new(1.0, q.bits).unwrap()))
        .collect();
    let mut integer = model.clone();
    for &(i, q) in &quantizers {
        let w = integer.weight_mut(i);
        for v in w.data_mut() {
            *v = (*v / q.interval).round();
        }
    }
    let cm = encode(&integer, &unit, IndexBits::Auto).unwrap();
    let batch = Tensor::from_fn(&[4, 2, 8, 8], |_| rng.random_range(-1.0..1.0));
    let d = max_abs_diff(&infer_compressed(&cm, &batch).unwrap(), &integer.forward(&batch).unwrap());
    assert!(d <= 1e-12, "{d}");
}

/// Walks the raw "ADNC" bytes without the library's reader.
struct RawCount {
    records: u64,
    nonzeros: u64,
    data_bits: u64,
    total_bits: u64,
    dense_bits: u64,
}

fn raw_recount(bytes: &[u8]) -> RawCount {
    let mut pos = 0usize;
    let mut take = |n: usize| {
        let s = &bytes[pos..pos + n];
        pos += n;
        s
    };
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap()) as u64;
    assert_eq!(take(4), b"ADNC");
    take(2);
    let rank = take(1)[0] as usize;
    take(4 * rank);
    let specs = u32_at(take(4));
    for _ in 0..specs {
        let fields = match take(1)[0] {
            0 => 2,
            1 => 7,
            2 => 2,
            _ => 0,
        };
        take(4 * fields);
    }
    let layers = u32_at(take(4));
    let mut c = RawCount {
        records: 0,
        nonzeros: 0,
        data_bits: 0,
        total_bits: 0,
        dense_bits: 0,
    };
    for _ in 0..layers {
        take(4); // id
        let rank = take(1)[0] as usize;
        let weights: u64 = (0..rank).map(|_| u32_at(take(4))).product();
        let n = take(1)[0] as u64;
        let b = take(1)[0] as u64;
        take(4);
        let records = u32_at(take(4));
        take(4);
        let header_bytes = 4 + 1 + 4 * rank as u64 + 1 + 1 + 4 + 4 + 4;
        let stream = take((records * (n + b)).div_ceil(8) as usize);
        let bit = |i: u64| (stream[(i / 8) as usize] >> (i % 8)) as u64 & 1;
        let field = |start: u64, width: u64| (0..width).map(|j| bit(start + j) << j).sum::<u64>();
        let mut nonzeros = 0;
        for r in 0..records {
            let gap = field(r * (n + b), b);
            if gap != (1 << b) - 1 {
                nonzeros += 1;
            }
        }
        c.records += records;
        c.nonzeros += nonzeros;
        c.data_bits += nonzeros * n;
        c.total_bits += records * (n + b) + 8 * header_bytes;
        c.dense_bits += 32 * weights;
        let bias = u32_at(take(4));
        take(8 * bias as usize);
    }
    assert_eq!(pos, bytes.len());
    c
}

#[test]
fn size_report_matches_raw_recount() {
    let mut rng = StdRng::seed_from_u64(67);
    for trial in 0..50 {
        let (model, quantizers) = quantized_model(&mut rng, &small_specs(), &[2, 8, 8]);
        let bits = if trial % 2 == 0 { IndexBits::Auto } else { IndexBits::Fixed(1 + trial as u8 % 5) };
        let cm = encode(&model, &quantizers, bits).unwrap();
        let report = size_report(&cm);
        let raw = raw_recount(&to_bytes(&cm).unwrap());
        assert_eq!(raw.nonzeros, cm.nonzero_count() as u64);
        assert_eq!(raw.records, cm.layers.iter().map(|l| l.records as u64).sum::<u64>());
        assert_eq!(report.data_bits, raw.data_bits);
        assert_eq!(report.total_bits, raw.total_bits);
        assert_eq!(report.dense_bits, raw.dense_bits);
        assert!(report.total_bits >= report.data_bits);
        assert_eq!(report.data_ratio, raw.dense_bits as f64 / raw.data_bits as f64);
    }
}

#[test]
fn halving_level_bits_halves_data_size() {
    let mut rng = StdRng::seed_from_u64(71);
    let w4 = Quantizer::new(0.25, 4).unwrap();
    let w = random_levels(&mut rng, &[500], &Quantizer::new(0.25, 2).unwrap(), 0.2);
    let at = |q: &Quantizer| {
        let cm = CompressedModel {
            input_shape: vec![500],
            specs: vec![LayerSpec::dense(500, 1)],
            layers: vec![encode_layer(0, &w.clone().reshape(&[1, 500]).unwrap(), &[0.0], q, IndexBits::Auto).unwrap()],
        };
        size_report(&cm).data_bits
    };
    assert_eq!(at(&w4), 2 * at(&Quantizer::new(0.25, 2).unwrap()));
}

#[test]
fn single_record_decodes_to_first_weight() {
    let w = Tensor::new(vec![3], vec![0.5, 0.0, 0.0]).unwrap();
    let quant = Quantizer::new(0.5, 2).unwrap();
    let l = encode_layer(0, &w, &[], &quant, IndexBits::Fixed(4)).unwrap();
    assert_eq!(l.records, 1);
    assert_eq!(l.stream[0] & 0xF, 0);
    assert_eq!(code_level((l.stream[0] >> 4 & 0b11) as u32, 2), 1);
    assert_eq!(l.decode().unwrap().data(), &[0.5, 0.0, 0.0]);
}
