use std::collections::BTreeMap;
use std::path::PathBuf;

use prunq::nn::{stream_rng, Conv2d, LayerSpec, ModelGraph};
use prunq::planner::{
    alpha_at, break_even_ratio, cost_report, layer_macs, plan_compression, plan_layers,
    propose_reductions, search_step, AccuracyConstraint, AccuracyProbe, CompressionPlan,
    LayerCost, LayerUsage, PlannerConfig, PlannerLayer, PlatformProfile,
};
use prunq::{Error, Result};
use rand::Rng;

fn profile_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../profiles").join(name)
}

/// The five conv layers and first FC layer of AlexNet with their per-sample inputs.
fn alexnet_layers() -> Vec<(&'static str, LayerSpec, Vec<usize>)> {
    vec![
        ("conv1", LayerSpec::Conv2d(Conv2d::new(3, 96, 11).with_stride(4)), vec![3, 227, 227]),
        (
            "conv2",
            LayerSpec::Conv2d(Conv2d::new(96, 256, 5).with_padding(2).with_groups(2)),
            vec![96, 27, 27],
        ),
        ("conv3", LayerSpec::Conv2d(Conv2d::new(256, 384, 3).with_padding(1)), vec![256, 13, 13]),
        (
            "conv4",
            LayerSpec::Conv2d(Conv2d::new(384, 384, 3).with_padding(1).with_groups(2)),
            vec![384, 13, 13],
        ),
        (
            "conv5",
            LayerSpec::Conv2d(Conv2d::new(384, 256, 3).with_padding(1).with_groups(2)),
            vec![384, 13, 13],
        ),
        ("fc1", LayerSpec::dense(9216, 4096), vec![9216]),
    ]
}

fn alexnet_costs() -> Vec<LayerCost> {
    alexnet_layers()
        .iter()
        .enumerate()
        .map(|(i, (_, spec, input))| layer_macs(i, spec, input).unwrap())
        .collect()
}

fn millions(x: f64) -> i64 {
    (x / 1e6).round() as i64
}

#[test]
fn alexnet_operation_counts() {
    let ops: Vec<i64> = alexnet_costs().iter().map(|c| millions(c.operations as f64)).collect();
    assert_eq!(ops, vec![211, 448, 299, 224, 150, 75]);
    for c in alexnet_costs() {
        assert_eq!(c.operations, 2 * c.macs);
    }
    // Grouped conv2: 27·27·256·5·5·48 MACs.
    assert_eq!(alexnet_costs()[1].macs, 27 * 27 * 256 * 25 * 48);
}

#[test]
fn alexnet_pruned_rows_at_8_bits() {
    let costs = &alexnet_costs()[..5];
    let names: Vec<String> = alexnet_layers()[..5].iter().map(|l| l.0.to_string()).collect();
    let density = [0.84, 0.38, 0.35, 0.37, 0.37];
    let usage: Vec<LayerUsage> = costs
        .iter()
        .zip(density)
        .map(|(c, d)| LayerUsage {
            layer: c.layer,
            nonzeros: (c.weights as f64 * d).round() as u64,
            bits: 8,
        })
        .collect();
    let r = cost_report(costs, &names, &usage).unwrap();
    let pruned: Vec<i64> = r.layers.iter().map(|l| millions(l.pruned_operations)).collect();
    // Within 1M: the published rows scale already-rounded operation counts.
    for (got, want) in pruned.iter().zip([177, 170, 105, 83, 56]) {
        assert!((got - want).abs() <= 1, "{got} vs {want}");
    }
    // The MAC x bits row is the rounded row times 8.
    for ((row, p), want) in r.layers.iter().zip(&pruned).zip([1416, 1360, 840, 664, 448]) {
        assert_eq!(row.operations_bits, 8.0 * row.pruned_operations);
        assert!((8 * p - want).abs() <= 8, "{} vs {want}", 8 * p);
    }
    assert_eq!(r.total_operations, costs.iter().map(|c| c.operations).sum::<u64>());
}

#[test]
fn sample_profile_break_even() {
    let p = PlatformProfile::load(profile_path("sample-55.json")).unwrap();
    assert!((p.break_even_portion().unwrap() - 0.55).abs() < 1e-12);
    let r = break_even_ratio(&p).unwrap();
    assert!((r - 2.22).abs() <= 0.01, "{r}");
    let p = PlatformProfile::load(profile_path("always-faster.json")).unwrap();
    assert_eq!(break_even_ratio(&p).unwrap(), 1.0);
}

#[test]
fn reductions_proportional_to_compute() {
    let d = propose_reductions(&[(300, 2_000_000), (500, 1_000_000)], 0.5);
    assert_eq!(d[0], 2.0 * d[1]);

    let mut rng = stream_rng(11, 0);
    for _ in 0..1000 {
        let layers: Vec<(usize, u64)> = (0..rng.random_range(2..7))
            .map(|_| (rng.random_range(1..100_000), rng.random_range(1..1_000_000_000)))
            .collect();
        let d = propose_reductions(&layers, rng.random_range(0.01..1.0));
        for i in 0..layers.len() {
            for j in 0..layers.len() {
                let lhs = d[i] * layers[j].1 as f64;
                let rhs = d[j] * layers[i].1 as f64;
                assert!((lhs - rhs).abs() <= 4.0 * f64::EPSILON * lhs.abs());
            }
        }
    }
}

/// Accuracy that falls as each layer's kept fraction drops below its own
/// sensitivity threshold. Monotone non-decreasing in every alpha.
struct StubProbe {
    weights: Vec<usize>,
    sensitivity: Vec<f64>,
    threshold: Vec<f64>,
    reference: f64,
    calls: usize,
}

impl StubProbe {
    /// FC thresholds sit below the 4x coordination ratio and conv thresholds
    /// below the starting alphas, so the start is always feasible.
    fn random(layers: &[PlannerLayer], rng: &mut impl Rng) -> Self {
        Self {
            sensitivity: layers.iter().map(|_| rng.random_range(0.0..0.2)).collect(),
            threshold: layers
                .iter()
                .map(|l| {
                    let cap = if l.conv { l.alpha as f64 / l.weights as f64 } else { 0.25 };
                    rng.random_range(0.0..cap)
                })
                .collect(),
            weights: layers.iter().map(|l| l.weights).collect(),
            reference: 0.99,
            calls: 0,
        }
    }

    fn eval(&self, alphas: &[(usize, usize)]) -> f64 {
        let mut acc = self.reference;
        for (i, &(_, a)) in alphas.iter().enumerate() {
            let kept = a as f64 / self.weights[i] as f64;
            if kept < self.threshold[i] {
                acc -= self.sensitivity[i] * (self.threshold[i] - kept) / self.threshold[i];
            }
        }
        acc
    }
}

impl AccuracyProbe for StubProbe {
    fn accuracy(&mut self, alphas: &[(usize, usize)]) -> Result<f64> {
        self.calls += 1;
        Ok(self.eval(alphas))
    }
}

fn random_layers(rng: &mut impl Rng) -> Vec<PlannerLayer> {
    let convs = rng.random_range(1..5);
    let fcs = rng.random_range(0..3);
    (0..convs + fcs)
        .map(|i| {
            let weights = rng.random_range(10..5000);
            let conv = i < convs;
            PlannerLayer {
                layer: 2 * i,
                name: format!("l{i}"),
                conv,
                weights,
                operations: if conv {
                    rng.random_range(1_000..10_000_000)
                } else {
                    2 * weights as u64
                },
                alpha: if conv { rng.random_range(weights / 2..=weights) } else { weights },
            }
        })
        .collect()
}

fn random_profile(rng: &mut impl Rng) -> PlatformProfile {
    let cross = rng.random_range(0.05..0.85);
    PlatformProfile::new("stub", vec![(0.0, 0.3), (cross, 1.0), (0.95, 4.0)]).unwrap()
}

#[test]
fn restoration_is_monotone_over_random_runs() {
    let mut rng = stream_rng(23, 0);
    let mut restores_seen = 0;
    for run in 0..100 {
        let layers = random_layers(&mut rng);
        let profile = random_profile(&mut rng);
        let break_even = break_even_ratio(&profile).unwrap();
        let mut probe = StubProbe::random(&layers, &mut rng);
        let constraint = AccuracyConstraint {
            reference: 0.99,
            max_drop: rng.random_range(0.0..0.05),
        };
        let config = PlannerConfig {
            step_fraction: rng.random_range(0.1..0.9),
            ..PlannerConfig::default()
        };
        let out = plan_layers(&layers, &profile, constraint, &config, &mut probe).unwrap();

        let mut alpha: Vec<usize> = layers
            .iter()
            .map(|l| if l.conv { l.alpha } else { (l.weights as f64 / 4.0).ceil() as usize })
            .collect();
        let mut restored = vec![false; layers.len()];
        for round in &out.rounds {
            for (i, &(_, a)) in round.alphas.iter().enumerate() {
                let now_restored = round.restored.contains(&layers[i].layer);
                assert!(!(restored[i] && a != layers[i].weights), "run {run}: layer {i} un-restored");
                if now_restored {
                    assert_eq!(a, layers[i].weights);
                    restored[i] = true;
                } else if !restored[i] {
                    assert!(a <= alpha[i], "run {run}: alpha of layer {i} grew");
                }
                alpha[i] = a;
            }
        }
        for (i, pl) in out.plan.layers.iter().enumerate() {
            assert!(pl.alpha >= 1 && pl.alpha <= pl.weights);
            if restored[i] {
                assert!(pl.restored, "run {run}: restore lost in final plan");
            }
            if pl.restored {
                restores_seen += 1;
                assert_eq!(pl.alpha, pl.weights);
            } else if layers[i].conv {
                assert!(pl.ratio() >= break_even, "run {run}: {} below break-even", pl.name);
            } else {
                assert_eq!(pl.alpha, (pl.weights as f64 / 4.0).ceil() as usize);
            }
        }
        let acc = probe.eval(&out.plan.alphas());
        assert!(constraint.admits(acc), "run {run}: final plan infeasible");
    }
    assert!(restores_seen > 0, "no run exercised restoration");
}

#[test]
fn binary_search_matches_linear_scan() {
    let tol = 1.0 / 64.0;
    let mut rng = stream_rng(29, 0);
    for _ in 0..200 {
        let t0: f64 = rng.random_range(0.0..1.0);
        let feasible = |t: f64| t <= t0;
        let t = search_step(&mut |t| Ok(feasible(t)), tol).unwrap();
        let scan = (0..=4096).map(|k| k as f64 / 4096.0).filter(|&t| feasible(t)).fold(0.0, f64::max);
        assert!((t - scan).abs() <= tol, "t0 {t0}: search {t} scan {scan}");
        assert!(feasible(t));
    }

    // Same contract on the first round of planner runs with stub probes.
    for _ in 0..100 {
        let layers = random_layers(&mut rng);
        let profile = PlatformProfile::new("one", vec![(0.0, 1.0), (0.5, 2.0)]).unwrap();
        let mut probe = StubProbe::random(&layers, &mut rng);
        let constraint = AccuracyConstraint {
            reference: 0.99,
            max_drop: rng.random_range(0.0..0.05),
        };
        let out = plan_layers(&layers, &profile, constraint, &PlannerConfig::default(), &mut probe).unwrap();
        let first = &out.rounds[0];
        let start: Vec<usize> = layers
            .iter()
            .map(|l| if l.conv { l.alpha } else { (l.weights as f64 / 4.0).ceil() as usize })
            .collect();
        let at = |t: f64| -> Vec<(usize, usize)> {
            layers
                .iter()
                .enumerate()
                .map(|(i, l)| {
                    let a = match first.reductions.iter().find(|r| r.0 == l.layer) {
                        Some(&(_, d)) => alpha_at(start[i], d, t),
                        None => start[i],
                    };
                    (l.layer, a)
                })
                .collect()
        };
        let scan = (0..=4096)
            .map(|k| k as f64 / 4096.0)
            .filter(|&t| constraint.admits(probe.eval(&at(t))))
            .fold(0.0, f64::max);
        assert!((first.step - scan).abs() <= tol, "search {} scan {scan}", first.step);
    }
}

#[test]
fn unit_break_even_restores_nothing() {
    let mut rng = stream_rng(31, 0);
    let profile = PlatformProfile::load(profile_path("always-faster.json")).unwrap();
    for _ in 0..50 {
        let layers = random_layers(&mut rng);
        let mut probe = StubProbe::random(&layers, &mut rng);
        let loose = AccuracyConstraint {
            reference: 0.99,
            max_drop: 1.0,
        };
        let out = plan_layers(&layers, &profile, loose, &PlannerConfig::default(), &mut probe).unwrap();
        assert!(out.plan.layers.iter().all(|l| !l.restored));
        assert!(out.rounds.iter().all(|r| r.restored.is_empty()));
    }
}

#[test]
fn infeasible_start_is_an_error() {
    let layers = vec![PlannerLayer {
        layer: 0,
        name: "c".into(),
        conv: true,
        weights: 100,
        operations: 1000,
        alpha: 10,
    }];
    let mut probe = StubProbe {
        weights: vec![100],
        sensitivity: vec![0.5],
        threshold: vec![0.5],
        reference: 0.99,
        calls: 0,
    };
    let constraint = AccuracyConstraint {
        reference: 0.99,
        max_drop: 0.01,
    };
    let profile = PlatformProfile::new("p", vec![(0.0, 1.0), (0.5, 2.0)]).unwrap();
    let err = plan_layers(&layers, &profile, constraint, &PlannerConfig::default(), &mut probe);
    assert!(matches!(err, Err(Error::Infeasible(_))));
    assert_eq!(probe.calls, 1);
}

#[test]
fn probes_are_cached() {
    let mut rng = stream_rng(37, 0);
    let layers = random_layers(&mut rng);
    let mut probe = StubProbe::random(&layers, &mut rng);
    let profile = PlatformProfile::new("p", vec![(0.0, 1.0), (0.5, 2.0)]).unwrap();
    let c = AccuracyConstraint {
        reference: 0.99,
        max_drop: 0.02,
    };
    let out = plan_layers(&layers, &profile, c, &PlannerConfig::default(), &mut probe).unwrap();
    assert_eq!(probe.calls, out.probes);
}

#[test]
fn lenet_plan_with_stub_probe() {
    let model = ModelGraph::lenet5(&mut stream_rng(1, 0));
    let profile = PlatformProfile::load(profile_path("sample-55.json")).unwrap();
    let weights: Vec<usize> = model.prunable_layers().iter().map(|&i| model.weight(i).len()).collect();
    let mut probe = StubProbe {
        weights,
        sensitivity: vec![0.3, 0.05, 0.05, 0.05],
        threshold: vec![0.9, 0.1, 0.1, 0.1],
        reference: 0.99,
        calls: 0,
    };
    let c = AccuracyConstraint {
        reference: 0.99,
        max_drop: 0.01,
    };
    let baseline = BTreeMap::from([("conv2".to_string(), 2500usize)]);
    let out = plan_compression(&model, &baseline, &profile, c, &PlannerConfig::default(), &mut probe).unwrap();
    let plan = &out.plan;
    plan.validate(&model).unwrap();
    // conv1 cannot go below 90% kept without a large drop, so it lands under
    // break-even; conv2 tolerates 8% kept.
    assert!(plan.layers[0].restored);
    assert!(!plan.layers[1].restored, "{plan:?}");
    assert!(plan.layers[1].alpha >= 2000 && plan.layers[1].alpha < 2100, "{}", plan.layers[1].alpha);
    assert_eq!(plan.layers[2].alpha, (400_000f64 / 4.0).ceil() as usize);
    assert_eq!(plan.layers[3].alpha, 1250);
    assert_eq!(plan.layers[1].bits, Some(4));
    assert_eq!(plan.layers[2].bits, Some(3));

    let text = plan.to_json().unwrap();
    assert_eq!(&CompressionPlan::from_json(&text).unwrap(), plan);

    let bad = BTreeMap::from([("fc1".to_string(), 10usize)]);
    assert!(plan_compression(&model, &bad, &profile, c, &PlannerConfig::default(), &mut probe).is_err());
}

#[test]
fn manual_plan_targets() {
    let model = ModelGraph::lenet5(&mut stream_rng(1, 0));
    let alphas = BTreeMap::from([("conv2".to_string(), 2500usize), ("fc1".to_string(), 40_000)]);
    let bits = BTreeMap::from([("fc2".to_string(), 5u8)]);
    let plan = CompressionPlan::from_targets(&model, &alphas, &bits, Some(3), Some(2)).unwrap();
    let got: Vec<(usize, Option<u8>)> = plan.layers.iter().map(|l| (l.alpha, l.bits)).collect();
    assert_eq!(got, vec![(500, Some(3)), (2500, Some(3)), (40_000, Some(2)), (5000, Some(5))]);

    let unknown = BTreeMap::from([("conv9".to_string(), 1usize)]);
    assert!(CompressionPlan::from_targets(&model, &unknown, &BTreeMap::new(), None, None).is_err());
    let too_big = BTreeMap::from([("conv1".to_string(), 501usize)]);
    assert!(CompressionPlan::from_targets(&model, &too_big, &BTreeMap::new(), None, None).is_err());

    let mut v2 = plan.clone();
    v2.schema_version = 2;
    assert!(CompressionPlan::from_json(&v2.to_json().unwrap()).is_err());
}
