//! `fxlv`: batch front end for FX local volatility calibration.

mod commands;
mod config;
mod error;
mod manifest;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{Engine, Inputs};
use crate::error::{CliError, Result};

#[derive(Parser)]
#[command(name = "fxlv", version, about = "FX local volatility calibration under stochastic rates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Classical Dupire local volatility under deterministic rates.
    Dupire(RunArgs),
    /// Local volatility under stochastic rates (Monte Carlo or PDE engine).
    Calibrate(RunArgs),
    /// Leverage function of the local/stochastic hybrid.
    Hybrid(RunArgs),
    /// Invariant checks and plot data for a finished run directory.
    Report(ReportArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration, or the manifest.json of an earlier run.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum)]
    engine: Option<Engine>,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Random seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory to report on.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Config whose output directory is reported on.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Dupire(a) => {
            let inputs = Inputs::load(&a.config, a.seed)?;
            commands::dupire(&inputs, &inputs.out_dir(a.out.as_deref())?)?;
        }
        Command::Calibrate(a) => {
            let inputs = Inputs::load(&a.config, a.seed)?;
            let engine = inputs.engine(a.engine)?;
            commands::calibrate(&inputs, engine, &inputs.out_dir(a.out.as_deref())?)?;
        }
        Command::Hybrid(a) => {
            let inputs = Inputs::load(&a.config, a.seed)?;
            commands::hybrid(&inputs, a.engine, &inputs.out_dir(a.out.as_deref())?)?;
        }
        Command::Report(a) => {
            let dir = match (a.out, a.config) {
                (Some(dir), _) => dir,
                (None, Some(cfg)) => Inputs::load(&cfg, None)?.out_dir(None)?,
                (None, None) => return Err(error::config("report needs --out or --config")),
            };
            let checks = report::report(&dir)?;
            let failed = checks.iter().filter(|c| !c.pass).count();
            if failed > 0 {
                return Err(CliError::ChecksFailed {
                    failed,
                    total: checks.len(),
                });
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fxlv: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
