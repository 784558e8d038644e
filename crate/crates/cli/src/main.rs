//! `meshsplat`: generate synthetic datasets, reconstruct, calibrate, evaluate,
//! export and render.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "meshsplat", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON config; missing fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads, 0 for all cores.
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset (ellipsoid, bumpy or robot).
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scene: Option<String>,
    },
    /// Recover mesh, surfels and cameras from a dataset.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        /// Soft-mask falloff in pixels.
        #[arg(long)]
        tau: Option<f64>,
        /// Use the squared-distance soft-mask target.
        #[arg(long)]
        literal_smask: bool,
    },
    /// Recover robot joint angles and camera rotations.
    Calibrate {
        #[command(flatten)]
        common: Common,
        /// Joint noise standard deviation in radians.
        #[arg(long)]
        sigma: Option<f64>,
        /// Overrides the iteration count.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Held-out PSNR/SSIM after camera alignment, and Chamfer distance.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// `state.json` written by `reconstruct`.
        #[arg(long)]
        state: Option<PathBuf>,
        #[arg(long)]
        gt_mesh: Option<PathBuf>,
    },
    /// Write mesh and splat PLY files from a reconstruction state.
    Export {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        state: Option<PathBuf>,
    },
    /// Render a splat PLY from the cameras of a dataset.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        splats: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<meshsplat::Error>() {
        Some(e) if e.is_numerical() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Gen { common, scene } => commands::gen(&common, scene),
        Command::Reconstruct {
            common,
            dataset,
            steps,
            tau,
            literal_smask,
        } => commands::reconstruct(&common, dataset, steps, tau, literal_smask),
        Command::Calibrate {
            common,
            sigma,
            steps,
        } => commands::calibrate(&common, sigma, steps),
        Command::Eval {
            common,
            dataset,
            state,
            gt_mesh,
        } => commands::eval(&common, dataset, state, gt_mesh),
        Command::Export { common, state } => commands::export(&common, state),
        Command::Render {
            common,
            splats,
            dataset,
        } => commands::render(&common, splats, dataset),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
