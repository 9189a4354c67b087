use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use impreg_core::Mode;

#[derive(Debug, Parser)]
#[command(name = "impreg", version, about = "Deformable image registration with coordinate networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Register a moving image to a fixed image.
    Register(RegisterArgs),
    /// Apply a stored displacement field to an image or mask.
    Warp(WarpArgs),
    /// Compute SSIM, folding and Dice for a registration result.
    Evaluate(EvaluateArgs),
    /// Generate a synthetic pair with a known field.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Plain,
    Dec,
    DecExcl,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Plain => Mode::Plain,
            ModeArg::Dec => Mode::Dec,
            ModeArg::DecExcl => Mode::DecExcl,
        }
    }
}

/// `N` for a square grid or `HxW`.
pub fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("invalid size '{s}': {e}"));
    match s.split_once(['x', 'X']) {
        Some((h, w)) => Ok((parse(h)?, parse(w)?)),
        None => {
            let n = parse(s)?;
            Ok((n, n))
        }
    }
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    #[arg(long)]
    pub moving: PathBuf,
    #[arg(long)]
    pub fixed: PathBuf,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "dec-excl")]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 1000)]
    pub epochs: usize,
    /// Registration grid, `N` or `HxW`. Inputs are resampled to it.
    #[arg(long, default_value = "256", value_parser = parse_size)]
    pub size: (usize, usize),
    /// Weight of the moving-image similarity term.
    #[arg(long, default_value_t = 1.0)]
    pub alpha1: f64,
    /// Weight of the support-image similarity term.
    #[arg(long, default_value_t = 1.0)]
    pub alpha2: f64,
    /// Weight of the Jacobian regularizer.
    #[arg(long, default_value_t = 1.0)]
    pub alpha3: f64,
    /// Weight of the reconstruction term.
    #[arg(long, default_value_t = 100.0)]
    pub alpha4: f64,
    /// Weight of the exclusion term.
    #[arg(long, default_value_t = 1.0)]
    pub alpha5: f64,
    /// Local NCC window, `N` or `HxW`.
    #[arg(long, default_value = "32", value_parser = parse_size)]
    pub lncc_window: (usize, usize),
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fixed-order reductions (the default).
    #[arg(long, conflicts_with = "parallel")]
    pub deterministic: bool,
    /// Multithreaded kernels; results may differ in the last bits.
    #[arg(long)]
    pub parallel: bool,
    /// Hidden units per network layer.
    #[arg(long, default_value_t = 256)]
    pub width: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    /// Maximum grid points per recorded network pass.
    #[arg(long, default_value_t = 16_384)]
    pub chunk_rows: usize,
    /// Moving-space segmentation for Dice.
    #[arg(long, requires = "fixed_mask")]
    pub moving_mask: Option<PathBuf>,
    /// Fixed-space segmentation for Dice.
    #[arg(long, requires = "moving_mask")]
    pub fixed_mask: Option<PathBuf>,
    /// Also write network checkpoints.
    #[arg(long)]
    pub save_networks: bool,
    /// Progress line interval in epochs; 0 disables.
    #[arg(long, default_value_t = 100)]
    pub log_every: usize,
}

#[derive(Debug, Args)]
pub struct WarpArgs {
    #[arg(long)]
    pub field: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Treat the input as a binary mask.
    #[arg(long)]
    pub mask: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub moved: PathBuf,
    /// Resampled to the moved image's grid when sizes differ.
    #[arg(long)]
    pub fixed: PathBuf,
    #[arg(long)]
    pub field: PathBuf,
    #[arg(long, requires = "fixed_mask")]
    pub moved_mask: Option<PathBuf>,
    #[arg(long, requires = "moved_mask")]
    pub fixed_mask: Option<PathBuf>,
    /// `config.json` written by `register`, for the digest.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "64", value_parser = parse_size)]
    pub size: (usize, usize),
    /// Maximum displacement in pixels.
    #[arg(long, default_value_t = 6.0)]
    pub deform_amp: f64,
    /// Number of expression blobs added to the moving image.
    #[arg(long, default_value_t = 0)]
    pub texture: usize,
    #[arg(long, default_value_t = 0.4)]
    pub texture_contrast: f64,
    /// Blob radius in pixels.
    #[arg(long, default_value_t = 2.5)]
    pub texture_radius: f64,
    #[arg(long)]
    pub out: PathBuf,
}
