//! `conesrecon` command-line front end.
//!
//! Exit status: 0 on success, 2 on usage errors, 1 when a stage fails.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use conesrecon::recon::Step;

#[derive(Parser, Debug)]
#[command(name = "conesrecon", version, about = "3D cones navigator reconstruction and autofocus motion correction")]
pub struct Cli {
    /// Worker threads.
    #[arg(long, global = true, env = "CONESRECON_THREADS", value_parser = clap::value_parser!(u16).range(1..))]
    pub threads: Option<u16>,
    /// Seed for every random choice in the run.
    #[arg(long, global = true, default_value_t = 1)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Simulate a motion-corrupted multi-coil acquisition into a directory.
    Simulate(SimulateArgs),
    /// Generate one heartbeat's cones trajectory with density weights.
    Traj(TrajArgs),
    /// Reconstruct one k-space set.
    Recon(ReconArgs),
    /// Run the unrolled network on one k-space set.
    Infer(InferArgs),
    /// Estimate global and regional motion from per-heartbeat navigators.
    Motion(MotionArgs),
    /// Build the motion bank and combine it by local gradient entropy.
    Autofocus(AutofocusArgs),
    /// Time every stage on one acquisition.
    Bench(BenchArgs),
    /// Correlation, histogram and plot-ready CSVs.
    Report(ReportArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Density-compensated adjoint (gridding).
    Adjoint,
    /// Wavelet-regularized ISTA.
    Ista,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Acquisition settings (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Phantom scene (JSON); defaults to the cardiac scene.
    #[arg(long)]
    pub scene: Option<PathBuf>,
    #[arg(long)]
    pub heartbeats: Option<usize>,
    #[arg(long)]
    pub coils: Option<usize>,
    /// Noise level as SNR in dB.
    #[arg(long)]
    pub snr: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrajArgs {
    /// Output CTRJ file.
    #[arg(long)]
    pub out: PathBuf,
    /// Trajectory settings (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub heartbeat: u32,
}

#[derive(Args, Debug, Clone)]
pub struct IstaArgs {
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub iters: Option<usize>,
    /// `auto` or a fixed step size.
    #[arg(long)]
    pub step: Option<Step>,
    /// Reconstruction settings (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReconArgs {
    /// Trajectory (CTRJ).
    #[arg(long)]
    pub traj: PathBuf,
    /// Multi-coil k-space (CKS1).
    #[arg(long)]
    pub input: PathBuf,
    /// Coil maps (CMAP).
    #[arg(long)]
    pub maps: PathBuf,
    #[arg(long, value_enum, default_value_t = Method::Ista)]
    pub method: Method,
    #[command(flatten)]
    pub ista: IstaArgs,
    /// Output volume (CVL1).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub traj: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub maps: PathBuf,
    /// Network weights (UWT1).
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct MotionArgs {
    /// Acquisition directory written by `simulate`.
    #[arg(long)]
    pub input: PathBuf,
    /// Coil maps; defaults to `maps.cmap` in the input directory.
    #[arg(long)]
    pub maps: Option<PathBuf>,
    /// ROI mask (CVL1); defaults to `roi.cvl` in the input directory.
    #[arg(long)]
    pub roi: Option<PathBuf>,
    #[arg(long)]
    pub bins: Option<usize>,
    /// Motion settings (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output motion CSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AutofocusArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub maps: Option<PathBuf>,
    /// Motion CSV written by `motion`.
    #[arg(long)]
    pub motion: PathBuf,
    /// Reconstruction used for every bank member.
    #[arg(long, value_enum, default_value_t = Method::Adjoint)]
    pub method: Method,
    #[command(flatten)]
    pub ista: IstaArgs,
    #[arg(long, default_value_t = conesrecon::autofocus::DEFAULT_PATCH_RADIUS)]
    pub patch_radius: usize,
    /// Output volume (CVL1).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub maps: Option<PathBuf>,
    /// Network weights; random N=4, M=2, depth-64 weights when absent.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub roi: Option<PathBuf>,
    #[command(flatten)]
    pub ista: IstaArgs,
    /// Output CSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Acquisition directory with `motion_truth.csv`.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub motion: PathBuf,
    /// Histogram CSV written by `autofocus`.
    #[arg(long)]
    pub histogram: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n as usize).build_global() {
            eprintln!("conesrecon: setup failed: {e}");
            return ExitCode::from(1);
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("conesrecon: {e}");
            ExitCode::from(1)
        }
    }
}
