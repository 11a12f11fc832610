//! Config-driven command-line driver for linear-response experiments on
//! flat tori. Subcommands map to the library's pipelines: `respond` estimates
//! basis-wise response coefficients, `optimize` adds the unit-norm optimal
//! direction, `sweep` validates slopes against perturbed stationary averages,
//! `oracle` runs the grid transfer-operator diagnostics, and `simulate`
//! writes an orbit sample.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use torus_response::{Error, Result};

use crate::commands::CommandKind;
use crate::config::ExperimentConfig;

#[derive(Parser)]
#[command(
    name = "torus-response",
    about = "Linear response of additive-noise SDEs on flat tori",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Declarative experiment configuration (TOML). Flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the RNG seed from the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for the estimator pool (0 = one per logical CPU).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    /// Directory for CSV artifacts and the run metadata.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Run size: `paper` uses configured horizons, `desk` divides them by 5.
    #[arg(long, global = true, value_enum, default_value_t = Scale::Paper)]
    scale: Scale,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the response coefficient of every basis element.
    Respond,
    /// Estimate coefficients and assemble the unit-norm optimal perturbation.
    Optimize,
    /// Tabulate perturbed stationary averages over a range of strengths.
    Sweep,
    /// Run the grid transfer-operator diagnostics (dimensions 1 and 2 only).
    Oracle,
    /// Integrate one trajectory and write a strided orbit sample.
    Simulate,
}

impl Command {
    fn kind(&self) -> CommandKind {
        match self {
            Command::Respond => CommandKind::Respond,
            Command::Optimize => CommandKind::Optimize,
            Command::Sweep => CommandKind::Sweep,
            Command::Oracle => CommandKind::Oracle,
            Command::Simulate => CommandKind::Simulate,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Scale {
    /// Full experiment horizons as configured.
    Paper,
    /// Configured horizons divided by 5, for quick desk checks.
    Desk,
}

impl Scale {
    fn divisor(self) -> f64 {
        match self {
            Scale::Paper => 1.0,
            Scale::Desk => 5.0,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Scale::Paper => "paper",
            Scale::Desk => "desk",
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| Error::invalid(format!("worker pool: {e}")))?;
    }
    let file = match &cli.config {
        Some(path) => config::load(path)?,
        None => ExperimentConfig::default(),
    };
    let resolved = config::resolve(&file, cli.seed, cli.scale.divisor())?;
    commands::run(cli.command.kind(), &resolved, &cli.out, cli.scale.name())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
