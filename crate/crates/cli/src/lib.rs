//! The `vegecast` command suite. Every command reads an optional JSON config
//! (see [`config`]), writes its outputs under `--out` together with a
//! [`provenance`] manifest, and prints a one-line JSON summary on success or
//! a JSON error object on failure.

pub mod commands;
pub mod config;
pub mod error;
pub mod provenance;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

pub use error::{Error, Result};

/// Relative `--out` paths resolve against this directory when it is set.
pub const OUTPUT_DIR_ENV: &str = "VEGECAST_OUTPUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "vegecast", version, about = "Latent diffusion vegetation forecasting on minicubes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VaeStageArg {
    Pretrain,
    Finetune,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic minicube corpus with a train/val/test split.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train (pretrain) or fine-tune the frame VAE.
    TrainVae {
        #[arg(long, value_enum, default_value_t = VaeStageArg::Pretrain)]
        stage: VaeStageArg,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Pretrained checkpoint to fine-tune from.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the denoiser on latents of a frozen VAE.
    TrainDenoiser {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vae: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Forecast the future frames of one cube.
    Forecast {
        #[arg(long)]
        cube: PathBuf,
        #[arg(long)]
        vae: PathBuf,
        #[arg(long)]
        denoiser: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Ensemble size; the mean is written as the forecast.
        #[arg(long, default_value_t = 1)]
        members: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score the model and baselines on a split.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vae: PathBuf,
        #[arg(long)]
        denoiser: PathBuf,
        #[arg(long, default_value = "ndvi,arvi,rgbn")]
        targets: String,
        /// Score vegetated pixels only.
        #[arg(long)]
        masked: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and score ablated denoisers under one budget.
    Ablate {
        /// Comma-separated ablations (`full` is always included), or `standard`.
        #[arg(long, default_value = "standard")]
        flags: String,
        /// Optimizer steps per run.
        #[arg(long)]
        budget: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vae: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rescale one meteorological variable and measure the NDVI response.
    WhatIf {
        #[arg(long, default_value = "rainfall")]
        variable: String,
        /// One or more comma-separated scale factors.
        #[arg(long, value_delimiter = ',', required = true)]
        scale: Vec<f64>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vae: PathBuf,
        #[arg(long)]
        denoiser: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn a training log or a report into plot-ready CSV.
    Plot {
        /// A `train_log.jsonl`, a `report.json`, or a directory holding one.
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

impl Command {
    /// The subcommand as typed on the command line, e.g. `train-vae`.
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::TrainVae { .. } => "train-vae",
            Command::TrainDenoiser { .. } => "train-denoiser",
            Command::Forecast { .. } => "forecast",
            Command::Evaluate { .. } => "evaluate",
            Command::Ablate { .. } => "ablate",
            Command::WhatIf { .. } => "what-if",
            Command::Plot { .. } => "plot",
        }
    }
}

/// Parses `args` and runs the command, returning the summary printed on
/// success.
pub fn run(cli: Cli) -> Result<serde_json::Value> {
    commands::dispatch(cli.command)
}
