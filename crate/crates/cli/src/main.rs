use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fhdun_core::model::Ablation;

mod commands;
mod manifest;

#[derive(Parser, Debug)]
#[command(name = "fhdun", version, about = "Block compressed sensing: sampling, reconstruction and training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Measure an image with a seeded Gaussian Φ (or a checkpoint's Φ).
    Sample(SampleArgs),
    /// Recover an image from a measurement file.
    Reconstruct(ReconstructArgs),
    /// Train a network from a JSON config.
    Train(TrainArgs),
    /// Sample and reconstruct a set of images and report PSNR/SSIM.
    Evaluate(EvaluateArgs),
    /// Run the built-in invariant checks.
    Verify,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Solver {
    /// Back-projection Φᵀy.
    Adjoint,
    Ista,
    Fista,
    Fhdun,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    /// Grayscale PGM or PNG image.
    pub input: PathBuf,
    /// Sampling ratio M/N in (0, 1]. Defaults to 0.25, or the checkpoint's ratio.
    #[arg(long)]
    pub ratio: Option<f64>,
    /// Seed of the measurement matrix.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub block: usize,
    /// Use the measurement matrix stored in this checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReconstructArgs {
    /// Measurement file written by `sample`.
    pub input: PathBuf,
    #[arg(long, value_enum, default_value_t = Solver::Fista)]
    pub solver: Solver,
    /// Trained network, required for `--solver fhdun`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Seed of Φ; read from the measurement's metadata file when omitted.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Solver settings as JSON (lambda, rho, max_iters, tol, transform, init).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Reference image; enables the metrics report.
    #[arg(long)]
    pub ground_truth: Option<PathBuf>,
    /// Run only the first K phases of the network.
    #[arg(long)]
    pub phases: Option<usize>,
    /// Output image (.pgm or .png).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// JSON training config. Without it the desk-scale defaults are used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Sampling ratio for the default config.
    #[arg(long)]
    pub ratio: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub ablate: Option<Ablation>,
    /// Resume from this checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Output checkpoint.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long, value_enum, default_value_t = Solver::Fhdun)]
    pub solver: Solver,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Directory of images; fixture scenes are used when omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Sampling ratio for the classical solvers.
    #[arg(long, default_value_t = 0.25)]
    pub ratio: f64,
    /// Seed of Φ for the classical solvers.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub block: usize,
    /// Seed of the generated fixture scenes.
    #[arg(long, default_value_t = 1000)]
    pub fixture_seed: u64,
    /// Solver settings JSON for ista/fista.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub phases: Option<usize>,
    /// Metric report JSON.
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Sample(a) => commands::sample(&a),
        Command::Reconstruct(a) => commands::reconstruct(&a),
        Command::Train(a) => commands::train(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Verify => commands::verify(),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
