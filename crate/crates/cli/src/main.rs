//! `halc`: command-line driver for data synthesis, backbone training, feature
//! export, hallucinator training, episodic evaluation and gradient checks.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use halc_core::dataset::{FeatureShape, SplitCounts};
use halc_core::models::HallucinatorVariant;
use halc_core::Precision;

use config::SynthKind;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration (exit code 2).
    Usage(String),
    /// A pipeline failed while running (exit code 1).
    Runtime(halc_core::Error),
    /// Reading or writing a file failed (exit code 1).
    File(PathBuf, halc_core::Error),
    /// A verification did not pass (exit code 3).
    Check(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Runtime(_) | CliError::File(..) => 1,
            CliError::Usage(_) => 2,
            CliError::Check(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(e) => write!(f, "{e}"),
            CliError::File(p, e) => write!(f, "{}: {e}", p.display()),
            CliError::Check(m) => write!(f, "check failed: {m}"),
        }
    }
}

impl From<halc_core::Error> for CliError {
    fn from(e: halc_core::Error) -> Self {
        match e {
            halc_core::Error::InvalidConfig(m) => CliError::Usage(m),
            other => CliError::Runtime(other),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "halc", version, about = "Tensor-feature hallucination for few-shot classification")]
pub struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Seed for every random stream of the command.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Forward-pass precision (single rounds activations to f32).
    #[arg(long, global = true)]
    pub precision: Option<Precision>,

    /// Print the effective configuration as JSON and exit.
    #[arg(long, global = true)]
    pub print_config: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic dataset (FTH1 file plus JSON split manifest).
    SynthData(SynthArgs),
    /// Train the toy backbone: stage 1 (cross-entropy) or stage 2 (distillation).
    TrainBackbone(TrainBackboneArgs),
    /// Run a trained backbone over an image dataset and write feature tensors.
    ExportFeatures(ExportArgs),
    /// Train a tensor or vector hallucinator on base-class features.
    TrainHallucinator(TrainHallucArgs),
    /// Evaluate method variants on N-way K-shot novel-class tasks.
    Eval(EvalArgs),
    /// Finite-difference check of every operator and both hallucinators.
    Gradcheck,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub kind: Option<SynthKind>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub per_class: Option<usize>,
    /// Feature (or image) shape as `d,h,w`.
    #[arg(long)]
    pub shape: Option<FeatureShape>,
    #[arg(long)]
    pub std: Option<f64>,
    /// Latent rank of the factor model.
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub loading_scale: Option<f64>,
    /// Class counts per split as `base,val,novel`.
    #[arg(long, value_parser = parse_splits)]
    pub splits: Option<SplitCounts>,
}

#[derive(Args, Debug)]
pub struct TrainBackboneArgs {
    /// Image dataset (FTH1).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub stage: u8,
    /// Stage-1 checkpoint to distil from (stage 2 only).
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    /// Output feature shape as `d,h,w`.
    #[arg(long)]
    pub feature: Option<FeatureShape>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// CSV of per-epoch mean loss.
    #[arg(long)]
    pub loss_log: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub backbone: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainHallucArgs {
    /// Feature dataset (FTH1).
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<HallucinatorVariant>,
    #[arg(long)]
    pub ways: Option<usize>,
    #[arg(long)]
    pub shots: Option<usize>,
    /// Generated features per class (M).
    #[arg(long)]
    pub generated: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub tasks_per_epoch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub noise_dim: Option<usize>,
    #[arg(long)]
    pub cond_dim: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    /// CSV of per-epoch mean loss and learning rate.
    #[arg(long)]
    pub loss_log: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Features of the evaluated (student) backbone.
    #[arg(long)]
    pub features: PathBuf,
    /// Features of the stage-1 backbone, used by the plain baseline.
    #[arg(long)]
    pub teacher_features: Option<PathBuf>,
    #[arg(long)]
    pub tfh: Option<PathBuf>,
    #[arg(long)]
    pub vfh: Option<PathBuf>,
    /// `all` or a comma-separated list of baseline, baseline_kd, vfh, tfh, tfh_ft.
    #[arg(long, default_value = "all")]
    pub variant: String,
    #[arg(long)]
    pub ways: Option<usize>,
    #[arg(long)]
    pub shots: Option<usize>,
    #[arg(long)]
    pub queries: Option<usize>,
    #[arg(long)]
    pub tasks: Option<usize>,
    #[arg(long)]
    pub m_test: Option<usize>,
    #[arg(long)]
    pub finetune_steps: Option<usize>,
    /// Worker threads for evaluating tasks in parallel.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Write the full report (per-task accuracies included) as JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

fn parse_splits(s: &str) -> Result<SplitCounts, String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match parts.as_slice() {
        &[base, val, novel] => Ok(SplitCounts { base, val, novel }),
        _ => Err(format!("expected base,val,novel, got {s:?}")),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("HALC_LOG", "info")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("halc: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
