//! `mpmrestore`: simulate, calibrate, estimate noise, restore and evaluate 3D volumes.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{Method, Preset, RestoreArgs};
use config::PipelineConfig;
use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "mpmrestore", version, about = "PSF calibration, noise estimation and constrained restoration of 3D microscopy volumes")]
struct Cli {
    /// TOML configuration; defaults are used for missing keys.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Writes a synthetic experiment (ground truth, kernel, observation, manifest).
    Simulate {
        #[arg(long, value_enum, default_value = "bead")]
        preset: Preset,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Locates isolated beads and writes their regions as CSV.
    ExtractBeads {
        #[arg(long, short)]
        input: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Fits every bead and writes the per-bead table, the average and the averaged kernel.
    EstimatePsf {
        #[arg(long, short)]
        input: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Estimates the affine noise variance law and writes the segment table.
    EstimateNoise {
        #[arg(long, short)]
        input: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Restores an observation with a known kernel.
    Restore {
        #[arg(long, short)]
        input: PathBuf,
        #[arg(long)]
        psf: PathBuf,
        /// Noise CSV from `estimate-noise`; estimated on the fly when absent.
        #[arg(long)]
        noise: Option<PathBuf>,
        /// Background level.
        #[arg(long, default_value_t = 0.0)]
        alpha: f64,
        #[arg(long, value_enum, default_value = "pmms")]
        method: Method,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Compares a test volume with a reference.
    Evaluate {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// CSV output; stdout when absent.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Penalized restorations over a log-spaced χ grid, scored against the truth.
    SweepChi {
        #[arg(long, short)]
        input: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        psf: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        alpha: f64,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Configuration utilities.
    Config {
        #[command(subcommand)]
        action: ConfigAction,
    },
}

#[derive(Debug, Subcommand)]
enum ConfigAction {
    /// Prints the effective configuration as TOML.
    Dump,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = PipelineConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Simulate { preset, seed, out } => {
            if let Some(s) = seed {
                cfg.seed = s;
            }
            commands::simulate(&cfg, preset, &out)
        }
        Command::ExtractBeads { input, out } => commands::extract_beads(&cfg, &input, &out),
        Command::EstimatePsf { input, out } => commands::estimate_psf(&cfg, &input, &out),
        Command::EstimateNoise { input, out } => commands::estimate_noise(&cfg, &input, &out).map(|_| ()),
        Command::Restore { input, psf, noise, alpha, method, out } => {
            let noise = noise.as_deref().map(commands::read_noise_csv).transpose()?;
            commands::restore(&cfg, &RestoreArgs { input, psf, noise, alpha, method, out })
        }
        Command::Evaluate { reference, test, out } => commands::evaluate(&reference, &test, out.as_deref()).map(|_| ()),
        Command::SweepChi { input, truth, psf, alpha, out } => commands::sweep_chi(&cfg, &input, &truth, &psf, alpha, &out),
        Command::Config { action: ConfigAction::Dump } => {
            print!("{}", cfg.dump());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.into()
        }
    }
}
