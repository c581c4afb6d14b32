//! `capa` — command-line workbench for continuous-aperture-array
//! beamforming: dataset generation, training, evaluation, classical
//! baselines, experiment sweeps, and beam export.
//!
//! Exit codes: 0 success, 2 usage error, 3 missing artifact, 4 numeric
//! failure. Results are delimiter-separated text with a header row plus a
//! JSON sidecar carrying config hash and seed for provenance. The run
//! directory root defaults to `./runs` and can be overridden with the
//! `CAPA_RUN_ROOT` environment variable.

mod experiments;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use capa_core::error::CapaError;

#[derive(Parser)]
#[command(name = "capa", version, about = "Continuous-aperture-array beamforming workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct SceneArgs {
    /// Number of users per scene.
    #[arg(long, default_value_t = 4)]
    pub users: usize,
    /// SNR scale (dimensionless).
    #[arg(long, default_value_t = 1e5)]
    pub zeta: f64,
    /// Aperture side length in meters (square aperture).
    #[arg(long, default_value_t = 0.5)]
    pub aperture_side: f64,
    /// Wavelength in meters.
    #[arg(long, default_value_t = 0.0107)]
    pub wavelength: f64,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a scenario dataset file.
    GenData {
        #[command(flatten)]
        scene: SceneArgs,
        /// Number of scenes.
        #[arg(long, default_value_t = 100)]
        count: usize,
        /// RNG seed.
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Output file (JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the three-network stack and write checkpoints + metrics.
    Train {
        #[command(flatten)]
        scene: SceneArgs,
        /// Optional JSON config file; flags override its fields.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Training scenes.
        #[arg(long, default_value_t = 2000)]
        scenes: usize,
        /// Training epochs.
        #[arg(long, default_value_t = 40)]
        epochs: usize,
        /// Pretraining epochs for the approximator networks.
        #[arg(long, default_value_t = 30)]
        pretrain_epochs: usize,
        /// Pretraining samples.
        #[arg(long, default_value_t = 2000)]
        pretrain_samples: usize,
        /// Batch size.
        #[arg(long, default_value_t = 128)]
        batch: usize,
        /// Schedule: phased | alternative | phased+alternative.
        #[arg(long, default_value = "phased+alternative")]
        schedule: String,
        /// Seed for data and initialization.
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Use the dense (FNN) variant of all three networks.
        #[arg(long, default_value_t = false)]
        fnn: bool,
        /// Use exact Gram algebra in place of the approximator networks.
        #[arg(long, default_value_t = false)]
        oracle: bool,
        /// Plain gradient-descent updates instead of Adam.
        #[arg(long, default_value_t = false)]
        sgd: bool,
        /// Output run directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate trained checkpoints on a fresh test split.
    Eval {
        #[command(flatten)]
        scene: SceneArgs,
        /// Run directory holding policy.json / proj.json checkpoints.
        #[arg(long)]
        checkpoint_dir: PathBuf,
        /// Test scenes.
        #[arg(long, default_value_t = 200)]
        count: usize,
        /// Test-set seed.
        #[arg(long, default_value_t = 3)]
        seed: u64,
    },
    /// Run a classical solver and emit run records.
    Baseline {
        #[command(flatten)]
        scene: SceneArgs,
        /// Method: mf | spd_wmmse | gram_wmmse.
        #[arg(long)]
        method: String,
        /// Patches per axis for the discretized solver.
        #[arg(long, default_value_t = 6)]
        m_per_axis: usize,
        /// Number of scenes.
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long, default_value_t = 3)]
        seed: u64,
        /// Output TSV file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a desk-scale experiment family and write plot-ready results.
    Experiment {
        #[command(flatten)]
        scene: SceneArgs,
        /// Family: mse_vs_time | se_vs_epoch | se_vs_m | se_vs_ntr |
        /// se_vs_snr | se_vs_aperture | timing.
        #[arg(long)]
        family: String,
        /// Comma-separated methods: gnn,fnn,mf,spd_wmmse,gram_wmmse,oracle_mode.
        #[arg(long, default_value = "")]
        methods: String,
        /// Comma-separated sweep values (family-specific).
        #[arg(long, default_value = "")]
        sweep: String,
        /// Scenes per sweep point.
        #[arg(long, default_value_t = 20)]
        scenes: usize,
        /// Training epochs for learned methods.
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        /// Training-set size for learned methods.
        #[arg(long, default_value_t = 1000)]
        train_scenes: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Trained run directory (for families that evaluate a checkpoint).
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample a beamformer's continuous field on a grid for plotting.
    ExportBeam {
        #[command(flatten)]
        scene: SceneArgs,
        /// mf | checkpoint
        #[arg(long, default_value = "mf")]
        method: String,
        /// Run directory with a trained policy (method = checkpoint).
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
        /// Scene seed (users drawn from the default region).
        #[arg(long, default_value_t = 5)]
        seed: u64,
        /// Sampling grid nodes per axis.
        #[arg(long, default_value_t = 32)]
        grid: usize,
        /// Output TSV file.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match experiments::dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            let code = match err.downcast_ref::<CapaError>() {
                Some(CapaError::MissingArtifact(_)) => 3,
                Some(CapaError::Argument(_)) => 2,
                Some(_) => 4,
                None => 4,
            };
            ExitCode::from(code)
        }
    }
}
