//! Batch front end: price, converge, boundary, calibrate, analyze, bench.
//!
//! Each run reads one JSON config. Command-line flags override config
//! fields, and files named in the config are read before the config hash is
//! taken. Exit codes: 0 success, 2 configuration error, 3 numerical failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(recproj::Error),
}

impl From<recproj::Error> for CliError {
    fn from(e: recproj::Error) -> Self {
        if e.is_config_error() {
            CliError::Config(e.to_string())
        } else {
            CliError::Numerical(e)
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "recproj", version, about = "Recursive-projection option pricing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Price one contract and print a JSON record.
    Price(Common),
    /// Price across resolution levels and fit the error decay.
    Converge(Common),
    /// Trace the early-exercise boundary.
    Boundary(Common),
    /// Fit model parameters to quotes.
    Calibrate(Common),
    /// Exercise decisions, losses and implied fees over events.
    Analyze(Common),
    /// Error against wall time for the lattice, trees and Monte Carlo.
    Bench(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run config.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Model JSON file, replacing the config's model.
    #[arg(long)]
    model_file: Option<PathBuf>,
    /// Contract JSON file, replacing the config's contract.
    #[arg(long)]
    contract_file: Option<PathBuf>,
    #[arg(long)]
    spot: Option<f64>,
    /// Price-axis resolution level J.
    #[arg(short = 'J', long)]
    level: Option<u32>,
    /// Variance-axis resolution level.
    #[arg(long)]
    var_level: Option<u32>,
    #[arg(long)]
    width_mult: Option<f64>,
    /// Fourier grid oversampling factor.
    #[arg(long)]
    oversample: Option<usize>,
    /// Ignore the environment's dividends.
    #[arg(long)]
    no_dividends: bool,
    #[arg(long)]
    quotes: Option<PathBuf>,
    #[arg(long)]
    events: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    /// Directory for output files; the main artifact goes to stdout if unset.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

impl Common {
    fn apply(self) -> Result<RunConfig, CliError> {
        let mut c = RunConfig::load(self.config.as_deref())?;
        if self.model_file.is_some() {
            c.model_file = self.model_file;
        }
        if self.contract_file.is_some() {
            c.contract_file = self.contract_file;
        }
        c.resolve_files()?;
        if let Some(v) = self.spot {
            c.spot = Some(v);
        }
        if let Some(v) = self.level {
            c.lattice.level = v;
        }
        if let Some(v) = self.var_level {
            c.lattice.var_level = v;
        }
        if let Some(v) = self.width_mult {
            c.lattice.width_mult = v;
        }
        if let Some(v) = self.oversample {
            c.lattice.oversample = v;
        }
        if self.no_dividends {
            c.drop_dividends();
        }
        if self.quotes.is_some() {
            c.quotes_file = self.quotes;
        }
        if self.events.is_some() {
            c.analyze.events_file = self.events;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if self.threads.is_some() {
            c.threads = self.threads;
        }
        if self.out.is_some() {
            c.output = self.out;
        }
        c.validate()?;
        Ok(c)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (common, cmd): (Common, fn(&RunConfig) -> Result<commands::Artifacts, CliError>) = match cli.command {
        Command::Price(c) => (c, commands::price),
        Command::Converge(c) => (c, commands::converge),
        Command::Boundary(c) => (c, commands::boundary),
        Command::Calibrate(c) => (c, commands::calibrate),
        Command::Analyze(c) => (c, commands::analyze),
        Command::Bench(c) => (c, commands::bench),
    };
    let cfg = common.apply()?;
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    let artifacts = cmd(&cfg)?;
    artifacts.write(cfg.output.as_deref())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
