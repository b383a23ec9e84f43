//! `dyncontract`: solve, verify and compare dynamic insurance contracts from a scenario file.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{CliError, Run};
use config::ScenarioConfig;

#[derive(Parser)]
#[command(name = "dyncontract", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Scenario file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `out` in the scenario file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Pass/fail tolerance of the verification checks.
    #[arg(long, global = true)]
    tol: Option<f64>,
    /// Evaluation budget of the exhaustive incentive check.
    #[arg(long = "ic-budget", global = true)]
    ic_budget: Option<u64>,
    /// Worker threads; falls back to DYNCONTRACT_THREADS.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Clone)]
enum Command {
    /// Solve the relaxed program at target utilities and check its structure.
    Solve,
    /// Competitive equilibrium, existence condition, optional commitment table.
    Equilibrium,
    /// Profit-maximizing monopoly contract and the information-rent condition.
    Monopoly,
    /// Check a serialized mechanism for incentive compatibility and monotonicity.
    Verify {
        /// Mechanism file; overrides `verify.mechanism`.
        #[arg(long)]
        mechanism: Option<PathBuf>,
    },
    /// One relaxed solve per grid point, in parallel.
    Sweep,
}

fn threads(cli: &Cli) -> Result<Option<usize>, CliError> {
    if cli.threads.is_some() {
        return Ok(cli.threads);
    }
    match std::env::var("DYNCONTRACT_THREADS") {
        Ok(s) => s.trim().parse().map(Some).map_err(|_| {
            CliError::config(format!("DYNCONTRACT_THREADS={s:?} is not a thread count"))
        }),
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = threads(&cli)? {
        if n == 0 {
            return Err(CliError::config("thread count must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::config(e.to_string()))?;
    }
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::config("missing --config PATH"))?;
    let (cfg, config_text) = ScenarioConfig::load(path)?;
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let tol = cli.tol.unwrap_or(cfg.solver.tol);
    if !(tol.is_finite() && tol >= 0.0) {
        return Err(CliError::config(format!(
            "tolerance {tol} must be finite and non-negative"
        )));
    }
    let ic_budget = cli.ic_budget.unwrap_or(cfg.solver.ic_budget);
    let mechanism = match &cli.command {
        Command::Verify { mechanism } => mechanism.clone(),
        _ => None,
    };
    let run = Run {
        cfg,
        config_text,
        out,
        tol,
        ic_budget,
        mechanism,
    };
    match cli.command {
        Command::Solve => commands::cmd_solve(&run),
        Command::Equilibrium => commands::cmd_equilibrium(&run),
        Command::Monopoly => commands::cmd_monopoly(&run),
        Command::Verify { .. } => commands::cmd_verify(&run),
        Command::Sweep => commands::cmd_sweep(&run),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
