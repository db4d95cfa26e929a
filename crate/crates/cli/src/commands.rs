use std::fs;
use std::path::{Path, PathBuf};

use prunq::data::{evaluate, evaluate_with, load_mnist_dir, Dataset, MnistSplits, TEST_IMAGES, TEST_LABELS, TRAIN_IMAGES, TRAIN_LABELS};
use prunq::format::{self, infer_compressed, size_report, CompressedModel, LayerSize, SizeReport, ADNC_MAGIC};
use prunq::nn::{checkpoint, stream_rng, train_epoch, AdamState, CrossEntropy, ModelGraph};
use prunq::pipeline::{compress, CompressionReport, PruneProbe};
use prunq::planner::{
    model_cost_report, plan_compression, AccuracyConstraint, CompressionPlan, CostReport, PlanRound, PlatformProfile,
};
use prunq::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{at_path, CliError, CliResult, Kind};

pub const PRETRAIN_STREAM_INIT: u64 = 0;
pub const PRETRAIN_STREAM_TRAIN: u64 = 1;

fn log(line: impl AsRef<str>) {
    eprintln!("{}", line.as_ref());
}

fn require_file(path: &Path, kind: Kind, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::new(kind, format!("{what} {} not found", path.display())))
    }
}

fn require_dataset(dir: &Path, need_train: bool) -> CliResult<()> {
    let mut names = vec![TEST_IMAGES, TEST_LABELS];
    if need_train {
        names.extend([TRAIN_IMAGES, TRAIN_LABELS]);
    }
    for name in names {
        require_file(&dir.join(name), Kind::Data, "dataset file")?;
    }
    Ok(())
}

fn prepare_out_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::config(format!("cannot create {}: {e}", dir.display())))
}

fn load_data(config: &RunConfig) -> CliResult<MnistSplits> {
    let dir = config.data_dir();
    let mut splits = load_mnist_dir(&dir).map_err(at_path(Kind::Data, &dir))?;
    if let Some(limit) = config.train_limit {
        if limit == 0 {
            return Err(CliError::config("train_limit must be positive"));
        }
        splits.train = splits.train.slice(0, limit.min(splits.train.len()));
    }
    log(format!(
        "data={} train={} validation={} test={}",
        dir.display(),
        splits.train.len(),
        splits.validation.len(),
        splits.test.len()
    ));
    Ok(splits)
}

fn load_checkpoint(path: &Path) -> CliResult<ModelGraph> {
    checkpoint::load(path).map_err(at_path(Kind::Data, path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::new(Kind::Other, e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| CliError::new(Kind::Other, format!("{}: {e}", path.display())))?;
    log(format!("wrote={}", path.display()));
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub validation_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub seed: u64,
    pub architecture: String,
    pub checkpoint: PathBuf,
    pub epochs: Vec<EpochRecord>,
    pub validation_accuracy: f64,
    pub test_accuracy: f64,
}

pub fn pretrain(config: &RunConfig) -> CliResult<PretrainReport> {
    let seed = config.seed()?;
    let (input_shape, specs) = config.architecture()?;
    require_dataset(&config.data_dir(), true)?;
    prepare_out_dir(&config.out_dir)?;
    let out = config.checkpoint();
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        prepare_out_dir(parent)?;
    }

    let mut model = ModelGraph::new(&input_shape, &specs, &mut stream_rng(seed, PRETRAIN_STREAM_INIT))?;
    let data = load_data(config)?;
    let mut adam = AdamState::new(&model, config.pretrain.adam);
    let mut rng = stream_rng(seed, PRETRAIN_STREAM_TRAIN);
    let mut epochs = Vec::new();
    for epoch in 1..=config.pretrain.epochs {
        let loss = train_epoch(&mut model, &mut adam, &data.train, &config.pretrain.train, &mut rng, &CrossEntropy, None)?;
        let validation_accuracy = evaluate(&model, &data.validation)?;
        log(format!("phase=pretrain epoch={epoch} loss={loss:.6} val_acc={validation_accuracy:.4}"));
        epochs.push(EpochRecord {
            epoch,
            loss,
            validation_accuracy,
        });
    }
    let validation_accuracy = evaluate(&model, &data.validation)?;
    let test_accuracy = evaluate(&model, &data.test)?;
    log(format!("phase=pretrain done=true val_acc={validation_accuracy:.4} test_acc={test_accuracy:.4}"));
    checkpoint::save(&model, &out).map_err(at_path(Kind::Other, &out))?;
    log(format!("wrote={}", out.display()));
    let report = PretrainReport {
        seed,
        architecture: config.architecture.clone(),
        checkpoint: out,
        epochs,
        validation_accuracy,
        test_accuracy,
    };
    write_json(&config.out_dir.join("pretrain_report.json"), &report)?;
    Ok(report)
}

pub fn compress_model(config: &RunConfig) -> CliResult<CompressionReport> {
    let pipeline = config.pipeline()?;
    let ckpt = config.checkpoint();
    require_file(&ckpt, Kind::Data, "checkpoint")?;
    if let Some(plan) = &config.plan {
        require_file(plan, Kind::Config, "plan")?;
    }
    require_dataset(&config.data_dir(), true)?;
    prepare_out_dir(&config.out_dir)?;

    let model = load_checkpoint(&ckpt)?;
    let plan = match &config.plan {
        Some(path) => CompressionPlan::load(path).map_err(at_path(Kind::Config, path))?,
        None => CompressionPlan::from_targets(&model, &config.alpha, &config.bits, config.conv_bits, config.fc_bits)?,
    };
    plan.validate(&model)?;
    for l in &plan.layers {
        let bits = l.bits.map_or("auto".to_string(), |b| b.to_string());
        log(format!("plan layer={} weights={} alpha={} bits={bits}", l.name, l.weights, l.alpha));
    }
    let data = load_data(config)?;
    let result = compress(&model, &plan, &data.train, Some(&data.validation), &pipeline, &mut |e| log(e.to_string()))?;
    let stored = result.encode(config.index_bits)?;
    let out = config.out_dir.join("model.adnc");
    format::save(&stored, &out).map_err(at_path(Kind::Other, &out))?;
    log(format!("wrote={}", out.display()));

    let baseline_test = evaluate(&model, &data.test)?;
    let retrained_test = evaluate(&result.retrained, &data.test)?;
    let final_test = compressed_accuracy(&stored, &data.test)?;
    let report = CompressionReport::new(
        &result,
        &stored,
        pipeline.seed,
        Some(baseline_test),
        Some(retrained_test),
        Some(final_test),
    )?;
    log(format!(
        "phase=compress done=true baseline_test={baseline_test:.4} retrained_test={retrained_test:.4} final_test={final_test:.4} data_ratio={:.2} total_ratio={:.2}",
        report.sizes.data_ratio, report.sizes.total_ratio
    ));
    write_json(&config.out_dir.join("compress_report.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanReport {
    pub plan: CompressionPlan,
    pub reference_accuracy: f64,
    pub rounds: Vec<PlanRound>,
    pub probes: usize,
}

pub fn plan(config: &RunConfig) -> CliResult<PlanReport> {
    let seed = config.seed()?;
    let profile_path = config
        .profile
        .clone()
        .ok_or_else(|| CliError::config("a platform profile is required (config key `profile` or --profile)"))?;
    require_file(&profile_path, Kind::Config, "profile")?;
    let ckpt = config.checkpoint();
    require_file(&ckpt, Kind::Data, "checkpoint")?;
    require_dataset(&config.data_dir(), true)?;
    prepare_out_dir(&config.out_dir)?;
    config.planner.validate()?;

    let profile = PlatformProfile::load(&profile_path).map_err(at_path(Kind::Config, &profile_path))?;
    let model = load_checkpoint(&ckpt)?;
    let data = load_data(config)?;
    let reference = evaluate(&model, &data.validation)?;
    log(format!("phase=plan profile={} reference_val_acc={reference:.4}", profile.name));
    let names: Vec<(usize, String)> = model.layers.iter().enumerate().map(|(i, l)| (i, l.name.clone())).collect();
    let name_of = |layer: usize| names[layer].1.clone();
    let mut probe = PruneProbe {
        model: &model,
        train: &data.train,
        validation: &data.validation,
        admm: config.probe.admm.clone(),
        retrain_epochs: config.probe.retrain_epochs,
        retrain: config.probe.retrain,
        retrain_adam: config.probe.retrain_adam,
        seed,
        observe: Some(Box::new(|alphas: &[(usize, usize)], acc: f64| {
            let list: Vec<String> = alphas.iter().map(|&(l, a)| format!("{}:{a}", name_of(l))).collect();
            log(format!("phase=probe alphas={} val_acc={acc:.4}", list.join(",")));
        })),
    };
    let constraint = AccuracyConstraint {
        reference,
        max_drop: config.max_accuracy_drop,
    };
    let outcome = plan_compression(&model, &config.baseline, &profile, constraint, &config.planner, &mut probe)?;
    for r in &outcome.rounds {
        let list: Vec<String> = r.alphas.iter().map(|&(l, a)| format!("{}:{a}", name_of(l))).collect();
        let restored: Vec<String> = r.restored.iter().map(|&l| name_of(l)).collect();
        log(format!(
            "phase=plan round={} step={:.6} alphas={} restored={}",
            r.round,
            r.step,
            list.join(","),
            restored.join(",")
        ));
    }
    let break_even = outcome.plan.break_even_ratio.unwrap_or(f64::NAN);
    log(format!("phase=plan done=true break_even_ratio={break_even:.4} probes={}", outcome.probes));
    let out = config.out_dir.join("plan.json");
    outcome.plan.save(&out).map_err(at_path(Kind::Other, &out))?;
    log(format!("wrote={}", out.display()));
    let report = PlanReport {
        plan: outcome.plan,
        reference_accuracy: reference,
        rounds: outcome.rounds,
        probes: outcome.probes,
    };
    write_json(&config.out_dir.join("plan_report.json"), &report)?;
    Ok(report)
}

/// A model file of either kind, told apart by its magic bytes.
pub enum Stored {
    Dense(ModelGraph),
    Compressed(CompressedModel),
}

impl Stored {
    pub fn load(path: &Path) -> CliResult<Self> {
        let bytes = fs::read(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        if bytes.starts_with(ADNC_MAGIC) {
            let cm = format::from_bytes(&bytes).map_err(at_path(Kind::Data, path))?;
            Ok(Stored::Compressed(cm))
        } else {
            let model = checkpoint::from_bytes(&bytes).map_err(at_path(Kind::Data, path))?;
            Ok(Stored::Dense(model))
        }
    }

    pub fn format(&self) -> &'static str {
        match self {
            Stored::Dense(_) => "adnn",
            Stored::Compressed(_) => "adnc",
        }
    }

    pub fn accuracy(&self, data: &Dataset) -> CliResult<f64> {
        match self {
            Stored::Dense(m) => Ok(evaluate(m, data)?),
            Stored::Compressed(cm) => compressed_accuracy(cm, data),
        }
    }

    pub fn cost(&self) -> CliResult<CostReport> {
        match self {
            Stored::Dense(m) => Ok(model_cost_report(m, &[])?),
            Stored::Compressed(cm) => {
                let bits: Vec<(usize, u32)> = cm.layers.iter().map(|l| (l.layer, l.bits as u32)).collect();
                Ok(model_cost_report(&cm.decode()?, &bits)?)
            }
        }
    }

    pub fn sizes(&self) -> SizeReport {
        match self {
            Stored::Dense(m) => SizeReport::from_layers(
                m.prunable_layers()
                    .into_iter()
                    .map(|l| LayerSize::dense(l, m.weight(l).len() as u64))
                    .collect(),
            ),
            Stored::Compressed(cm) => size_report(cm),
        }
    }
}

fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let classes = logits.shape()[1];
    logits
        .data()
        .chunks(classes)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Accuracy through inference on the stored integer levels.
pub fn compressed_accuracy(cm: &CompressedModel, data: &Dataset) -> CliResult<f64> {
    Ok(evaluate_with(data, |batch| Ok(argmax_rows(&infer_compressed(cm, batch)?)))?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub input: PathBuf,
    pub format: String,
    pub test_accuracy: f64,
    pub reference: Option<PathBuf>,
    pub reference_accuracy: Option<f64>,
    /// `test_accuracy − reference_accuracy`.
    pub accuracy_delta: Option<f64>,
    pub cost: CostReport,
    pub sizes: SizeReport,
}

pub fn eval(config: &RunConfig, input: &Path, reference: Option<&Path>) -> CliResult<EvalReport> {
    require_file(input, Kind::Data, "model")?;
    if let Some(r) = reference {
        require_file(r, Kind::Data, "reference model")?;
    }
    let dir = config.data_dir();
    require_dataset(&dir, false)?;

    let stored = Stored::load(input)?;
    let reference_model = reference.map(Stored::load).transpose()?;
    let test = prunq::data::load_idx(dir.join(TEST_IMAGES), dir.join(TEST_LABELS)).map_err(at_path(Kind::Data, &dir))?;
    let test_accuracy = stored.accuracy(&test)?;
    let reference_accuracy = reference_model.as_ref().map(|m| m.accuracy(&test)).transpose()?;
    let report = EvalReport {
        input: input.to_path_buf(),
        format: stored.format().to_string(),
        test_accuracy,
        reference: reference.map(Path::to_path_buf),
        reference_accuracy,
        accuracy_delta: reference_accuracy.map(|r| test_accuracy - r),
        cost: stored.cost()?,
        sizes: stored.sizes(),
    };
    log(format!(
        "phase=eval format={} test_acc={test_accuracy:.4} data_ratio={:.2} ops={} ops_bits={:.0}",
        report.format, report.sizes.data_ratio, report.cost.total_operations, report.cost.total_operations_bits
    ));
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_takes_first_maximum() {
        let t = Tensor::new(vec![3, 3], vec![0.1, 0.5, 0.5, -1.0, -2.0, -3.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(argmax_rows(&t), vec![1, 0, 2]);
    }

    #[test]
    fn dense_sizes_have_unit_ratio() {
        let model = ModelGraph::lenet5(&mut stream_rng(1, 0));
        let s = Stored::Dense(model).sizes();
        assert_eq!(s.data_ratio, 1.0);
        assert_eq!(s.total_ratio, 1.0);
        assert_eq!(s.dense_bits, 430_500 * 32);
    }
}
