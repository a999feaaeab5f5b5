//! Command-line front end: each subcommand runs one pipeline stage into a
//! run directory.

pub mod commands;
pub mod error;
pub mod run;
pub mod svg;
pub mod tables;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use neurokinect::config::Threshold;

#[derive(Debug, Parser)]
#[command(name = "neurokinect", version, about = "EEG to 3-D hand kinematics decoding")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run directory; overrides `output_dir`.
    #[arg(long, short = 'o', global = true)]
    pub out: Option<PathBuf>,
    /// Session directory or manifest; overrides `data.session`.
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    /// Overrides `seed` and NEUROKINECT_SEED.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Replace this command's existing artifacts.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic session into `<run>/session`.
    Synth,
    /// Condition every trial and export the prepared movement segments.
    Preprocess,
    /// Flag bad trials and write `qc_report.csv`.
    Qc {
        /// `strict`, `lenient`, `rt_only` or an RMSE value.
        #[arg(long)]
        threshold: Option<Threshold>,
    },
    /// Build the lagged dataset from the kept trials.
    Dataset {
        #[arg(long)]
        lags: Option<usize>,
        #[arg(long)]
        delay: Option<usize>,
        /// Also write `dataset.csv`.
        #[arg(long)]
        csv: bool,
    },
    /// Train the decoder on `dataset.bin`.
    Train {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Score the saved checkpoint on every split.
    Eval,
    /// Average LED-locked epochs over one or more subjects.
    Erp {
        /// Additional subject sessions.
        #[arg(long = "subject")]
        subjects: Vec<PathBuf>,
    },
    /// Plot measured against predicted trajectories.
    Report,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Preprocess => "preprocess",
            Command::Qc { .. } => "qc",
            Command::Dataset { .. } => "dataset",
            Command::Train { .. } => "train",
            Command::Eval => "eval",
            Command::Erp { .. } => "erp",
            Command::Report => "report",
        }
    }
}
