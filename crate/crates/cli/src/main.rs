//! Command-line front end: equilibrium solves, certificates, statistical
//! validation and facet-budget sweeps over a TOML run configuration.
//!
//! Exit codes: 0 success, 1 usage/config/data error, 2 non-convergence.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::CliOptions;
use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "scenario-games",
    version,
    about = "Equilibria of games with sampled coupling constraints, with probabilistic feasibility certificates"
)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory for documents and tables.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Override the uncertainty seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Emit the iterate trace as CSV.
    #[arg(long)]
    trace: bool,
    /// Enumerate every multiplier piece during projections.
    #[arg(long)]
    exhaustive_projection: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the constraint-tightening iteration once.
    Solve,
    /// Attach a priori and a posteriori certificates to a solve result.
    Certify {
        /// Path to a solve.json produced by the solve command.
        #[arg(long)]
        result: PathBuf,
    },
    /// Monte Carlo validation campaign against the binomial-tail budget.
    Validate,
    /// Sweep over the configured facet budgets.
    Sweep,
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let config = RunConfig::from_path(&cli.config)?;
    let opts = CliOptions {
        out_dir: cli.out,
        seed_override: cli.seed,
        trace: cli.trace,
        exhaustive_projection: cli.exhaustive_projection,
    };
    match cli.command {
        Command::Solve => {
            let (path, converged) = commands::cmd_solve(&config, &opts)?;
            println!("{}", path.display());
            if converged {
                Ok(ExitCode::SUCCESS)
            } else {
                log::warn!("iteration cap reached before the stopping tolerance");
                Ok(ExitCode::from(2))
            }
        }
        Command::Certify { result } => {
            let path = commands::cmd_certify(&config, &result, &opts)?;
            println!("{}", path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Validate => {
            let path = commands::cmd_validate(&config, &opts)?;
            println!("{}", path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep => {
            let path = commands::cmd_sweep(&config, &opts)?;
            println!("{}", path.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
