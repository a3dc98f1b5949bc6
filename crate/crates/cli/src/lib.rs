//! `lesionseg` command-line front-end.

pub mod commands;
pub mod config;
pub mod error;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::{LoadedConfig, PipelineConfig};
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "lesionseg", version, about = "Skin-lesion segmentation pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Pipeline configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dataset manifest (CSV with an `image,mask` header).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides the configured master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for per-image work (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Run single-threaded for bit-reproducible outputs.
    #[arg(long, global = true)]
    pub deterministic: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic lesion dataset and its manifest.
    Synth {
        /// Number of images (default from the config).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Write augmented variants of each manifest entry with overlays.
    Augment {
        #[arg(long, default_value_t = 4)]
        variants: usize,
    },
    /// Train ensemble members.
    Train {
        /// Train only this member (name or index).
        #[arg(long)]
        member: Option<String>,
    },
    /// Predict masks for one image or a manifest.
    Predict {
        #[arg(long)]
        image: Option<PathBuf>,
        /// Checkpoint directory (default from the config).
        #[arg(long)]
        models: Option<PathBuf>,
        /// Also write mask overlays.
        #[arg(long)]
        overlays: bool,
    },
    /// Score the ensemble (or a directory of masks) against ground truth.
    Evaluate {
        #[arg(long)]
        models: Option<PathBuf>,
        /// Score existing masks from this directory instead of running models.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Finite-difference check of every backward pass.
    Gradcheck {
        /// Perturb the named check's analytic gradient (negative control).
        #[arg(long)]
        sabotage: Option<String>,
    },
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match commands::execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
