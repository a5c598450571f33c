//! `cmclab` — boundary expansions, Dirichlet solves, and decay diagnostics
//! for constant-mean-curvature graphs over a half-space boundary.

mod commands;
mod config;

use clap::{Args, Parser, Subcommand};
use cmclab_core::{CmcError, Result};
use config::Config;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "cmclab", version, about, long_about = None)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Path to the JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (created if missing).
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Also write SVG plots where available.
    #[arg(long)]
    plot: bool,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Compute the boundary expansion and write it as JSON.
    Expand(Common),
    /// Solve the Dirichlet problem on the configured grid.
    Solve(Common),
    /// Measure remainder decay of a solution against an expansion.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Solution CSV (default: <out>/solution.csv).
        #[arg(long)]
        solution: Option<PathBuf>,
        /// Expansion JSON (default: <out>/expansion.json).
        #[arg(long)]
        expansion: Option<PathBuf>,
    },
    /// Run a named invariant suite: c31, parity, oracle, or jacobian.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Suite name.
        suite: String,
    },
    /// Sample an exact solution onto the grid; emit CSV, trace, and metadata.
    Exact(Common),
}

/// `CMCLAB_THREADS` caps worker parallelism. The engine is single-threaded,
/// so any positive cap is satisfied; the value is still validated so typos
/// fail loudly instead of silently doing nothing.
fn check_thread_cap() -> Result<()> {
    match std::env::var("CMCLAB_THREADS") {
        Err(_) => Ok(()),
        Ok(v) => match v.parse::<usize>() {
            Ok(k) if k >= 1 => Ok(()),
            _ => Err(CmcError::Config(format!(
                "CMCLAB_THREADS must be a positive integer, got '{v}'"
            ))),
        },
    }
}

fn load(common: &Common) -> Result<Config> {
    let mut cfg = Config::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    check_thread_cap()?;
    match cli.command {
        Command::Expand(c) => commands::cmd_expand(&load(&c)?, &c.out),
        Command::Solve(c) => commands::cmd_solve(&load(&c)?, &c.out),
        Command::Analyze { common, solution, expansion } => {
            commands::cmd_analyze(&load(&common)?, &common.out, solution, expansion, common.plot)
        }
        Command::Verify { common, suite } => {
            commands::cmd_verify(&load(&common)?, &suite, &common.out)
        }
        Command::Exact(c) => commands::cmd_exact(&load(&c)?, &c.out),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
