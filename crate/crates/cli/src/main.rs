//! `prunq`: pretrain, plan, compress and evaluate networks from the shell.
//!
//! Logs go to stderr as key=value lines; reports are JSON. Exit codes:
//! 0 success, 1 other failure, 2 configuration error, 3 data error,
//! 4 infeasible constraint.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use prunq::format::IndexBits;

use config::{parse_assignment, parse_index_bits, RunConfig};
use error::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "prunq", version, about = "Joint pruning and quantization toolkit")]
struct Cli {
    /// JSON run configuration
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// RNG seed (required here or in the config)
    #[arg(short, long, global = true)]
    seed: Option<u64>,

    /// Output directory
    #[arg(short, long, global = true)]
    out: Option<PathBuf>,

    /// Platform speedup profile (JSON)
    #[arg(short, long, global = true)]
    profile: Option<PathBuf>,

    /// MNIST directory (defaults to $PRUNQ_MNIST_DIR, then data/mnist)
    #[arg(long, global = true)]
    data: Option<PathBuf>,

    /// Train on only the first N training samples
    #[arg(long, global = true)]
    train_limit: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the baseline network and write a checkpoint
    Pretrain {
        #[arg(long)]
        epochs: Option<usize>,
        /// Architecture name ("lenet5") or JSON spec file
        #[arg(long)]
        architecture: Option<String>,
        /// Where to write the checkpoint
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Prune, retrain and quantize a checkpoint into an ADNC file
    Compress(CompressArgs),
    /// Choose per-layer pruning targets for a platform
    Plan {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Largest accepted validation-accuracy drop
        #[arg(long, allow_negative_numbers = true)]
        max_drop: Option<f64>,
        /// Starting kept weights, NAME=N (repeatable)
        #[arg(long, value_parser = parse_assignment::<usize>)]
        baseline: Vec<(String, usize)>,
    },
    /// Report test accuracy, operation counts and sizes of a model file
    Eval {
        /// Checkpoint or ADNC file
        model: PathBuf,
        /// Second model to compare accuracy against
        #[arg(long)]
        reference: Option<PathBuf>,
    },
}

#[derive(Args)]
struct CompressArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Plan file; overrides --alpha/--bits
    #[arg(long)]
    plan: Option<PathBuf>,
    /// Kept weights, NAME=N (repeatable)
    #[arg(long, value_parser = parse_assignment::<usize>)]
    alpha: Vec<(String, usize)>,
    /// Level bits, NAME=N (repeatable)
    #[arg(long, value_parser = parse_assignment::<u8>)]
    bits: Vec<(String, u8)>,
    #[arg(long)]
    conv_bits: Option<u8>,
    #[arg(long)]
    fc_bits: Option<u8>,
    /// "auto" or a fixed width
    #[arg(long, value_parser = parse_index_bits)]
    index_bits: Option<IndexBits>,
    /// ADMM penalty for both phases
    #[arg(long)]
    rho: Option<f64>,
    /// ADMM iteration cap for both phases
    #[arg(long)]
    iterations: Option<usize>,
    /// Minibatches per ADMM iteration
    #[arg(long)]
    max_batches: Option<usize>,
    #[arg(long)]
    retrain_epochs: Option<usize>,
}

impl Cli {
    fn resolve(&self) -> CliResult<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            c.seed = Some(s);
        }
        if let Some(o) = &self.out {
            c.out_dir = o.clone();
        }
        if let Some(p) = &self.profile {
            c.profile = Some(p.clone());
        }
        if let Some(d) = &self.data {
            c.data_dir = Some(d.clone());
        }
        if let Some(n) = self.train_limit {
            c.train_limit = Some(n);
        }
        match &self.command {
            Command::Pretrain {
                epochs,
                architecture,
                checkpoint,
            } => {
                if let Some(e) = epochs {
                    c.pretrain.epochs = *e;
                }
                if let Some(a) = architecture {
                    c.architecture = a.clone();
                }
                if let Some(p) = checkpoint {
                    c.checkpoint = Some(p.clone());
                }
            }
            Command::Compress(a) => a.apply(&mut c),
            Command::Plan {
                checkpoint,
                max_drop,
                baseline,
            } => {
                if let Some(p) = checkpoint {
                    c.checkpoint = Some(p.clone());
                }
                if let Some(d) = max_drop {
                    c.max_accuracy_drop = *d;
                }
                c.baseline.extend(baseline.iter().cloned());
            }
            Command::Eval { .. } => {}
        }
        Ok(c)
    }
}

impl CompressArgs {
    fn apply(&self, c: &mut RunConfig) {
        if let Some(p) = &self.checkpoint {
            c.checkpoint = Some(p.clone());
        }
        if let Some(p) = &self.plan {
            c.plan = Some(p.clone());
        }
        c.alpha.extend(self.alpha.iter().cloned());
        c.bits.extend(self.bits.iter().cloned());
        if self.conv_bits.is_some() {
            c.conv_bits = self.conv_bits;
        }
        if self.fc_bits.is_some() {
            c.fc_bits = self.fc_bits;
        }
        if let Some(b) = self.index_bits {
            c.index_bits = b;
        }
        let p = &mut c.pipeline;
        for admm in [&mut p.prune, &mut p.quantize] {
            if let Some(r) = self.rho {
                admm.rho = r;
            }
            if let Some(n) = self.iterations {
                admm.max_iterations = n;
            }
            if self.max_batches.is_some() {
                admm.train.max_batches = self.max_batches;
            }
        }
        if let Some(e) = self.retrain_epochs {
            p.retrain_epochs = e;
        }
    }
}

fn run(cli: &Cli) -> CliResult<()> {
    let config = cli.resolve()?;
    match &cli.command {
        Command::Pretrain { .. } => {
            commands::pretrain(&config)?;
        }
        Command::Compress(_) => {
            commands::compress_model(&config)?;
        }
        Command::Plan { .. } => {
            commands::plan(&config)?;
        }
        Command::Eval { model, reference } => {
            let report = commands::eval(&config, model, reference.as_deref())?;
            let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::new(error::Kind::Other, e.to_string()))?;
            println!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_config() {
        let cli = Cli::parse_from([
            "prunq", "--seed", "5", "compress", "--alpha", "fc1=100", "--rho", "0.01", "--index-bits", "6",
            "--fc-bits", "3",
        ]);
        let c = cli.resolve().unwrap();
        assert_eq!(c.seed, Some(5));
        assert_eq!(c.alpha["fc1"], 100);
        assert_eq!(c.pipeline.prune.rho, 0.01);
        assert_eq!(c.pipeline.quantize.rho, 0.01);
        assert_eq!(c.index_bits, IndexBits::Fixed(6));
        assert_eq!(c.fc_bits, Some(3));
        assert_eq!(c.conv_bits, Some(3));
    }

    #[test]
    fn global_flags_after_subcommand() {
        let cli = Cli::parse_from(["prunq", "plan", "--seed", "2", "--max-drop", "0.02", "--baseline", "conv2=2500"]);
        let c = cli.resolve().unwrap();
        assert_eq!(c.seed, Some(2));
        assert_eq!(c.max_accuracy_drop, 0.02);
        assert_eq!(c.baseline["conv2"], 2500);
    }
}
