//! Run configuration: a JSON file whose keys can each be overridden by a flag.
//!
//! Every key is optional except `seed`, which must come from the file or
//! `--seed`. Relative paths resolve against the working directory.
//!
//! ```json
//! {
//!   "seed": 7,
//!   "data_dir": "data/mnist",
//!   "architecture": "lenet5",
//!   "out_dir": "out",
//!   "checkpoint": "out/pretrained.adnn",
//!   "train_limit": null,
//!   "pretrain": { "epochs": 3, "train": { "batch_size": 64 }, "adam": { "learning_rate": 0.001 } },
//!   "pipeline": { "prune": { "rho": 0.003, "max_iterations": 50 }, "retrain_epochs": 2 },
//!   "plan": null,
//!   "alpha": { "conv1": 330, "conv2": 3000, "fc1": 36000, "fc2": 1000 },
//!   "bits": {},
//!   "conv_bits": 3,
//!   "fc_bits": 2,
//!   "index_bits": "auto",
//!   "profile": "profiles/sample-55.json",
//!   "planner": { "step_fraction": 0.5 },
//!   "max_accuracy_drop": 0.01,
//!   "baseline": { "conv2": 2500 },
//!   "probe": { "admm": { "max_iterations": 3 }, "retrain_epochs": 0 }
//! }
//! ```
//!
//! `pipeline.seed` is ignored; the top-level seed drives every phase.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use prunq::admm::AdmmConfig;
use prunq::format::IndexBits;
use prunq::nn::{lenet5_specs, AdamConfig, LayerSpec, TrainConfig};
use prunq::pipeline::PipelineConfig;
use prunq::planner::PlannerConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Dataset root used when neither the config nor `--data` names one.
pub const DATA_ENV: &str = "PRUNQ_MNIST_DIR";
const DEFAULT_DATA_DIR: &str = "data/mnist";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    /// Directory holding the four MNIST IDX files.
    pub data_dir: Option<PathBuf>,
    /// `"lenet5"` or a JSON file `{"input_shape": [...], "layers": [...]}`.
    pub architecture: String,
    pub out_dir: PathBuf,
    /// Pretrained model read by `compress` and `plan`; defaults to
    /// `<out_dir>/pretrained.adnn`.
    pub checkpoint: Option<PathBuf>,
    /// Train on only the first this-many training samples.
    pub train_limit: Option<usize>,
    pub pretrain: PretrainConfig,
    pub pipeline: PipelineConfig,
    /// Plan file for `compress`; when absent the plan is built from
    /// `alpha`, `bits`, `conv_bits` and `fc_bits`.
    pub plan: Option<PathBuf>,
    /// Kept weights per layer name. Unlisted layers stay dense.
    pub alpha: BTreeMap<String, usize>,
    /// Level bits per layer name, overriding `conv_bits`/`fc_bits`.
    pub bits: BTreeMap<String, u8>,
    /// `null` picks bits automatically per layer.
    pub conv_bits: Option<u8>,
    pub fc_bits: Option<u8>,
    pub index_bits: IndexBits,
    pub profile: Option<PathBuf>,
    pub planner: PlannerConfig,
    /// Largest validation-accuracy drop the planner may accept.
    pub max_accuracy_drop: f64,
    /// Starting kept weights for the planner, per convolution name.
    pub baseline: BTreeMap<String, usize>,
    pub probe: ProbeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            data_dir: None,
            architecture: "lenet5".into(),
            out_dir: PathBuf::from("out"),
            checkpoint: None,
            train_limit: None,
            pretrain: PretrainConfig::default(),
            pipeline: PipelineConfig::default(),
            plan: None,
            alpha: BTreeMap::new(),
            bits: BTreeMap::new(),
            conv_bits: Some(3),
            fc_bits: Some(2),
            index_bits: IndexBits::Auto,
            profile: None,
            planner: PlannerConfig::default(),
            max_accuracy_drop: 0.01,
            baseline: BTreeMap::new(),
            probe: ProbeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub train: TrainConfig,
    pub adam: AdamConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            train: TrainConfig::default(),
            adam: AdamConfig::default(),
        }
    }
}

/// The shortened prune run the planner uses to score a candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub admm: AdmmConfig,
    pub retrain_epochs: usize,
    pub retrain: TrainConfig,
    pub retrain_adam: AdamConfig,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            admm: AdmmConfig {
                max_iterations: 3,
                train: TrainConfig {
                    batch_size: 64,
                    max_batches: Some(200),
                },
                ..AdmmConfig::default()
            },
            retrain_epochs: 0,
            retrain: TrainConfig::default(),
            retrain_adam: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureFile {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| CliError::config(format!("{}: {}", path.display(), e.message)))
    }

    pub fn from_json(text: &str) -> CliResult<Self> {
        serde_json::from_str(text).map_err(|e| CliError::config(format!("parse error: {e}")))
    }

    pub fn seed(&self) -> CliResult<u64> {
        self.seed
            .ok_or_else(|| CliError::config("a seed is required (config key `seed` or --seed)"))
    }

    /// Config value, then the environment, then the default.
    pub fn data_dir(&self) -> PathBuf {
        self.data_dir
            .clone()
            .or_else(|| std::env::var_os(DATA_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR))
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.out_dir.join("pretrained.adnn"))
    }

    pub fn pipeline(&self) -> CliResult<PipelineConfig> {
        Ok(PipelineConfig {
            seed: self.seed()?,
            ..self.pipeline.clone()
        })
    }

    /// Input shape and layer list of the configured architecture.
    pub fn architecture(&self) -> CliResult<(Vec<usize>, Vec<LayerSpec>)> {
        if self.architecture == "lenet5" {
            return Ok((vec![1, 28, 28], lenet5_specs()));
        }
        let path = Path::new(&self.architecture);
        let text = fs::read_to_string(path).map_err(|e| {
            CliError::config(format!(
                "architecture {:?} is neither \"lenet5\" nor a readable file: {e}",
                self.architecture
            ))
        })?;
        let arch: ArchitectureFile = serde_json::from_str(&text)
            .map_err(|e| CliError::config(format!("{}: parse error: {e}", path.display())))?;
        Ok((arch.input_shape, arch.layers))
    }
}

/// Parses `name=value`.
pub fn parse_assignment<T: std::str::FromStr>(s: &str) -> Result<(String, T), String> {
    let (name, value) = s
        .split_once('=')
        .ok_or_else(|| format!("expected NAME=VALUE, got {s:?}"))?;
    let value = value
        .parse()
        .map_err(|_| format!("bad value {value:?} for {name}"))?;
    Ok((name.to_string(), value))
}

pub fn parse_index_bits(s: &str) -> Result<IndexBits, String> {
    if s == "auto" {
        return Ok(IndexBits::Auto);
    }
    match s.parse::<u8>() {
        Ok(b) if (1..=16).contains(&b) => Ok(IndexBits::Fixed(b)),
        _ => Err(format!("index bits must be \"auto\" or 1..=16, got {s:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_missing_keys() {
        let c = RunConfig::from_json(r#"{"seed": 4, "pipeline": {"prune": {"rho": 0.01}}}"#).unwrap();
        assert_eq!(c.seed().unwrap(), 4);
        assert_eq!(c.pipeline.prune.rho, 0.01);
        assert_eq!(c.pipeline.prune.max_iterations, 50);
        assert_eq!(c.pipeline().unwrap().seed, 4);
        assert_eq!(c.checkpoint(), PathBuf::from("out/pretrained.adnn"));
        assert_eq!(c.architecture().unwrap().1, lenet5_specs());
    }

    #[test]
    fn missing_seed_and_typos_are_config_errors() {
        assert!(RunConfig::from_json("{}").unwrap().seed().is_err());
        assert!(RunConfig::from_json(r#"{"sead": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"pretrain": {"epoch": 1}}"#).is_err());
        assert!(RunConfig::from_json("{").is_err());
    }

    #[test]
    fn json_round_trip() {
        let mut c = RunConfig {
            seed: Some(9),
            ..RunConfig::default()
        };
        c.alpha.insert("fc1".into(), 100);
        c.index_bits = IndexBits::Fixed(5);
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), c);
    }

    #[test]
    fn assignments_and_index_bits() {
        assert_eq!(parse_assignment::<usize>("conv1=330").unwrap(), ("conv1".into(), 330));
        assert!(parse_assignment::<usize>("conv1").is_err());
        assert!(parse_assignment::<u8>("fc1=300").is_err());
        assert_eq!(parse_index_bits("auto").unwrap(), IndexBits::Auto);
        assert_eq!(parse_index_bits("4").unwrap(), IndexBits::Fixed(4));
        assert!(parse_index_bits("0").is_err());
    }
}
