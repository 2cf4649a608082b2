//! `recomb`: command-line front end for the recombination solvers.

mod commands;
mod output;
mod scenario;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use recomb_core::DegeneracyReport;

use crate::scenario::{Overrides, Scenario};

#[derive(Debug, Parser)]
#[command(name = "recomb", version, about = "Solve the recombination equation three ways")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Scenario file (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Monte Carlo seed, overriding the scenario.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Integrator step, overriding the scenario.
    #[arg(long, global = true)]
    step: Option<f64>,
    /// Monte Carlo sample count, overriding the scenario.
    #[arg(long, global = true)]
    samples: Option<u64>,
    /// Format of tabular output.
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Bell number, two-block count and optionally the partitions with μ(0̲, ·).
    Lattice {
        /// Number of sites (1..=10); taken from the scenario if omitted.
        n: Option<usize>,
        /// List every partition with its Möbius value from the bottom.
        #[arg(long)]
        enumerate: bool,
    },
    /// Closed-form solution on the grid.
    Solve,
    /// Numerical integration of the coefficient and measure equations.
    Integrate,
    /// Monte Carlo estimate of the partitioning process distribution.
    Simulate,
    /// Closed form, integration and Monte Carlo against each other.
    Compare,
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Degenerate(Box<DegeneracyReport>),
    Tolerance(String),
    Other(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Degenerate(_) => 3,
            CliError::Tolerance(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Degenerate(r) => write!(f, "{r}"),
            CliError::Tolerance(m) => write!(f, "tolerance check failed: {m}"),
            CliError::Other(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<recomb_core::Error> for CliError {
    fn from(e: recomb_core::Error) -> Self {
        use recomb_core::Error as E;
        match e {
            E::Degenerate(r) => CliError::Degenerate(r),
            E::Domain(_) | E::Parse { .. } | E::GroundMismatch { .. } => CliError::Config(e.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

fn load(cli: &Cli) -> Result<Scenario, CliError> {
    let Some(path) = &cli.config else {
        return Err(CliError::Config("--config <path> is required".into()));
    };
    let overrides = Overrides {
        seed: cli.seed,
        step: cli.step,
        samples: cli.samples,
    };
    Scenario::load(path, &overrides)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Lattice { n, enumerate } => {
            let n = match n {
                Some(n) => *n,
                None => load(cli)?.ground.cardinality(),
            };
            commands::lattice(n, *enumerate, cli.format)
        }
        Command::Solve => commands::solve(&load(cli)?, &cli.out, cli.format),
        Command::Integrate => commands::integrate(&load(cli)?, &cli.out, cli.format),
        Command::Simulate => commands::simulate(&load(cli)?, &cli.out, cli.format),
        Command::Compare => commands::compare(&load(cli)?, &cli.out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("RECOMB_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
