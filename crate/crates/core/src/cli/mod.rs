//! Command-line front end. The `voco` binary only calls [`main`].

mod commands;
mod config;
mod run_dir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::eval::{EvalError, ProbeTask};
use crate::model::ModelError;
use crate::omni::OmniError;
use crate::real::Precision;
use crate::trainer::TrainerError;
use crate::volume::VolumeError;

pub use commands::{ascii_heat_grid, run};
pub use config::{DataConfig, RunConfig};
pub use run_dir::{RunDir, RunManifest, OUT_ROOT_ENV};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] VolumeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Training(#[from] TrainerError),
    #[error(transparent)]
    Omni(#[from] OmniError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{0}")]
    Io(String),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl CliError {
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Data(_) => "data",
            CliError::Model(_) => "model",
            CliError::Training(_) => "training",
            CliError::Omni(_) => "omni",
            CliError::Eval(_) => "eval",
            CliError::Io(_) => "io",
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Model(_) => 4,
            CliError::Training(_) => 5,
            CliError::Omni(_) => 6,
            CliError::Eval(_) => 7,
            CliError::Io(_) => 8,
        }
    }
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    match s {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        other => Err(format!("expected f32 or f64, got `{other}`")),
    }
}

#[derive(Debug, Parser)]
#[command(name = "voco", version, about = "Geometric-context volume contrast on synthetic phantoms")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for data generation, training and evaluation.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output root; defaults to $VOCO_OUT_ROOT, then `runs`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Float width: 32 or 64.
    #[arg(long, global = true, value_parser = parse_precision)]
    pub precision: Option<Precision>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic phantom dataset and its manifest.
    GenPhantoms {
        #[arg(long)]
        count: Option<usize>,
    },
    /// Self-supervised pre-training.
    Pretrain {
        /// Dataset manifest (JSON lines).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from a pre-training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Also checkpoint every N steps.
        #[arg(long)]
        checkpoint_every: Option<u64>,
    },
    /// Omni-supervised stages.
    #[command(subcommand)]
    Omni(OmniCommand),
    /// Position-prediction benchmark.
    EvalPosition {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint to evaluate; omitted means an untrained model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        crops: Option<usize>,
    },
    /// Transfer probe, scratch versus pre-trained.
    Probe {
        /// Pre-trained checkpoint; omitted runs the scratch arm only.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// phantom-seg or phantom-cls.
        #[arg(long)]
        task: Option<ProbeTask>,
        #[arg(long)]
        steps: Option<u64>,
        /// Train the encoder too, not only the head.
        #[arg(long)]
        full_network: bool,
    },
    /// Print position labels of one crop against a base grid.
    InspectLabels {
        /// Grid rows and columns.
        #[arg(long, num_args = 2, default_values_t = [4, 4])]
        grid: Vec<usize>,
        /// In-plane cell edge in voxels.
        #[arg(long, default_value_t = 10)]
        cell: usize,
        /// Crop origin x, y relative to the grid.
        #[arg(long, num_args = 2, default_values_t = [6, 5])]
        offset: Vec<usize>,
    },
}

#[derive(Debug, Subcommand)]
pub enum OmniCommand {
    /// Supervised + self-supervised training from scratch.
    Stage1 {
        #[arg(long)]
        data: PathBuf,
    },
    /// Label the unlabeled volumes with a stage-one model.
    PseudoLabel {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Continue training with real and accepted pseudo labels.
    Stage2 {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// `pseudo_labels.json` written by `pseudo-label`.
        #[arg(long)]
        pseudo: PathBuf,
    },
}

impl clap::builder::ValueParserFactory for ProbeTask {
    type Parser = clap::builder::ValueParser;
    fn value_parser() -> Self::Parser {
        clap::builder::ValueParser::new(|s: &str| s.parse::<ProbeTask>().map_err(|e| e.to_string()))
    }
}

/// Parses arguments, runs the command and maps failures to a categorized
/// error line and exit code.
pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(e.exit_code())
        }
    }
}
