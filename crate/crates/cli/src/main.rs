//! `hspi`: batch pipeline for holographic single-particle imaging experiments.
//!
//! One TOML file describes an experiment; each subcommand reads the outputs of
//! the previous ones from the output directory.

mod commands;
mod config;
mod error;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use crate::commands::Ctx;
use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "hspi", version, about = "Holographic single-particle imaging pipeline")]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, overriding `out_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print the effective configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Arm {
    Maxlp,
    Baseline,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the target density (and base/subunit for heterogeneous targets).
    MakeObject,
    /// Simulate diffraction datasets and their ground-truth latents.
    Simulate,
    /// Reconstruct from a simulated dataset.
    Reconstruct {
        #[arg(long, value_enum, default_value = "maxlp")]
        arm: Arm,
        /// Continue from the last checkpoint if there is one.
        #[arg(long)]
        resume: bool,
    },
    /// Fill unreliable pixels of the MaxLP model and phase it into a density.
    Phase,
    /// FRC curves, alignment and latent errors against the ground truth.
    Evaluate {
        /// Evaluate only this model (`.c128`) or density (`.f64`).
        #[arg(long)]
        recon: Option<PathBuf>,
        /// Ground truth to compare against (default: the generated object).
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Render figures from the evaluation outputs.
    Plot,
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = load_config(&cli)?;
    if cli.print_config {
        let text = toml::to_string_pretty(&cfg).map_err(|e| CliError::Config(e.to_string()))?;
        print!("{text}");
        return Ok(());
    }
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let command = cli
        .command
        .ok_or_else(|| CliError::Config("no subcommand given; see --help".into()))?;
    let ctx = Ctx { cfg, force: cli.force };
    match command {
        Command::MakeObject => commands::make_object(&ctx),
        Command::Simulate => commands::simulate(&ctx),
        Command::Reconstruct {
            arm: Arm::Maxlp,
            resume,
        } => commands::reconstruct_maxlp(&ctx, resume),
        Command::Reconstruct { arm: Arm::Baseline, .. } => commands::reconstruct_baseline(&ctx),
        Command::Phase => commands::phase(&ctx),
        Command::Evaluate { recon, truth } => commands::evaluate(&ctx, recon.as_deref(), truth.as_deref()),
        Command::Plot => plot::plot(&ctx).map(|files| {
            for f in files {
                log::info!("wrote {}", f.display());
            }
        }),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("HSPI_LOG", "info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hspi: {e}");
            e.exit_code()
        }
    }
}
