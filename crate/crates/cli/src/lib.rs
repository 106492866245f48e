//! Command-line driver: `synth`, `ingest`, `train`, `predict`, `backtest`
//! and `sweep` over a TOML run configuration.

pub mod commands;
pub mod config;
pub mod pipeline;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use thiserror::Error;

use lfm_core::factor::FactorMode;

use crate::config::{Overrides, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(lfm_core::Error),
}

impl From<lfm_core::Error> for CliError {
    fn from(e: lfm_core::Error) -> Self {
        match e {
            lfm_core::Error::Config(msg) => CliError::Usage(msg),
            other => CliError::Data(other),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "lfm", version, about = "Lookahead factor model pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML run configuration; built-in defaults when absent.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Global seed, overriding the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Factor for `backtest`: qfm, lfm or clairvoyant:H.
    #[arg(long, global = true, value_parser = parse_mode)]
    pub mode: Option<FactorMode>,
    /// Output directory, overriding `paths.out_dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Data directory, overriding `paths.data_dir`.
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic universe into the data directory.
    Synth,
    /// Validate the data directory and summarize the filtered panel.
    Ingest,
    /// Fit the configured predictor on the in-sample period.
    Train,
    /// Forecast the out-of-sample period and compare with the naive baseline.
    Predict,
    /// Simulate the portfolio over the out-of-sample period.
    Backtest,
    /// Backtest a range of clairvoyance horizons.
    Sweep {
        /// Comma-separated horizons in months, overriding `sweep.horizons`.
        #[arg(long, value_delimiter = ',')]
        horizons: Option<Vec<u32>>,
    },
}

fn parse_mode(s: &str) -> Result<FactorMode, String> {
    s.parse().map_err(|e: lfm_core::Error| e.to_string())
}

fn print_json<T: serde::Serialize>(value: &T) {
    if let Ok(text) = serde_json::to_string_pretty(value) {
        println!("{text}");
    }
}

/// Runs one command and returns the summary printed to stdout.
pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let overrides = Overrides {
        seed: cli.seed,
        mode: cli.mode,
        out_dir: cli.out.clone(),
        data_dir: cli.data_dir.clone(),
    };
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    match &cli.command {
        Command::Synth => print_json(&commands::cmd_synth(&cfg)?),
        Command::Ingest => print_json(&commands::cmd_ingest(&cfg)?),
        Command::Train => print_json(&commands::cmd_train(&cfg)?.1),
        Command::Predict => print_json(&commands::cmd_predict(&cfg)?.1),
        Command::Backtest => {
            let outcome = commands::cmd_backtest(&cfg)?;
            let r = &outcome.report;
            println!(
                "{}: CAR {:.4}, Sharpe {}, max drawdown {:.4}, final NAV {:.4}",
                r.mode,
                r.car,
                r.sharpe.map_or("n/a".to_string(), |s| format!("{s:.4}")),
                r.max_drawdown,
                r.final_nav
            );
        }
        Command::Sweep { horizons } => {
            let horizons = horizons
                .clone()
                .unwrap_or_else(|| cfg.sweep.horizons.clone());
            print_json(&commands::cmd_sweep(&cfg, &horizons)?);
        }
    }
    Ok(())
}

/// Parses `args` (including the program name), runs the command and maps
/// the outcome to an exit code: 0 success, 1 usage error, 2 data error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
