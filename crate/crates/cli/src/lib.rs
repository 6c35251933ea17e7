//! Command-line harness: synthetic data generation, training, evaluation,
//! sweeps, standalone MMD and phase-congruency maps.

pub mod commands;
pub mod csv_input;
pub mod output;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use commands::run;

#[derive(Debug, Parser)]
#[command(name = "modalign", version, about = "Cross-modality alignment experiments on synthetic data")]
pub struct Cli {
    /// Experiment config (JSON). Missing fields take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads for sweeps.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset and write it as CSV (plus PGM examples in image mode).
    Gen,
    /// Train an encoder and write a checkpoint and the per-epoch losses.
    Train,
    /// Evaluate a checkpoint on the held-out split.
    Eval(EvalArgs),
    /// Train and evaluate over a grid, several seeds per point.
    Sweep(SweepArgs),
    /// Multi-kernel MMD² between two CSV point clouds.
    Mmd(MmdArgs),
    /// Phase congruency and edge attention of a PGM image.
    PcMap(PcMapArgs),
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint path (defaults to `<out>/checkpoint.bin`).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Also run same-modality retrieval with self matches excluded.
    #[arg(long)]
    pub sanity: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepAxis {
    /// (w_intra, w_inter) pairs.
    Weights,
    /// Upper-body proportion.
    Ubp,
    /// Ablation variants M0–M4.
    Ablation,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_enum)]
    pub axis: SweepAxis,
    /// Seeds per grid point, starting at the config seed.
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    /// Grid override: `0.2:0.8` pairs for weights, numbers for ubp, names for ablation.
    #[arg(long, value_delimiter = ',')]
    pub values: Option<Vec<String>>,
}

#[derive(Debug, Args)]
pub struct MmdArgs {
    /// CSV of source vectors, one per row.
    pub x: PathBuf,
    /// CSV of target vectors.
    pub y: PathBuf,
    /// Base bandwidth; skips the median heuristic.
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long, default_value_t = modalign::amk_mmd::DEFAULT_KERNELS)]
    pub kernels: usize,
    #[arg(long, default_value_t = modalign::amk_mmd::DEFAULT_GAMMA)]
    pub gamma: f64,
    /// Explicit bandwidths; overrides `--sigma`, `--kernels` and `--gamma`.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub bandwidths: Option<Vec<f64>>,
    /// Kernel weight logits (default uniform).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub logits: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct PcMapArgs {
    /// Binary PGM (P5) input.
    pub input: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub scales: usize,
    #[arg(long, default_value_t = 6)]
    pub orientations: usize,
    #[arg(long, default_value_t = 3.0)]
    pub min_wavelength: f64,
    #[arg(long, default_value_t = 2.1)]
    pub mult: f64,
    #[arg(long, default_value_t = 0.55)]
    pub sigma_onf: f64,
    /// Noise threshold T, or `auto` for the Rayleigh estimate.
    #[arg(long, default_value = "0")]
    pub threshold: String,
    #[arg(long, default_value_t = modalign::pesam::DEFAULT_EPSILON)]
    pub epsilon: f64,
    /// Side of the box attention kernel (odd).
    #[arg(long, default_value_t = 3)]
    pub kernel_size: usize,
    #[arg(long, default_value_t = 4.0, allow_hyphen_values = true)]
    pub gain: f64,
    #[arg(long, default_value_t = -2.0, allow_hyphen_values = true)]
    pub bias: f64,
}
