//! `featclip`: post-hoc calibration by feature clipping, from stored
//! penultimate-layer features to reports and plot-data files.
//!
//! Exit status: 0 success, 2 usage or configuration error, 3 data error,
//! 4 numerically degenerate input.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use featclip::{Error, ErrorClass};

#[derive(Debug, Parser)]
#[command(name = "featclip", version, about = "Feature clipping calibration toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Global {
    /// Dataset directory (manifest.json plus tensor files).
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    /// Output directory; created if missing.
    #[arg(long, global = true, default_value = "featclip-out")]
    pub out: PathBuf,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Bin count for every ECE variant.
    #[arg(long, global = true, default_value_t = featclip::metrics::DEFAULT_BINS, value_parser = parse_bins)]
    pub bins: usize,
    #[arg(long, global = true, default_value_t = 0.1)]
    pub val_fraction: f64,
    /// JSON file with explicit `val_idx` / `test_idx` lists; overrides
    /// `--val-fraction`.
    #[arg(long, global = true)]
    pub split_file: Option<PathBuf>,
}

fn parse_bins(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("need at least one bin".into()),
        Ok(v) => Ok(v),
        Err(e) => Err(e.to_string()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Val,
    Test,
    All,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a dataset and summarize it, or generate the synthetic fixture.
    Ingest {
        /// Write the seeded synthetic clipping fixture to OUT/dataset instead.
        #[arg(long)]
        synthetic: bool,
        /// Sample count of the synthetic fixture.
        #[arg(long, requires = "synthetic")]
        n: Option<usize>,
        /// Also write a copy of the dataset with sha256 checksums to OUT/dataset.
        #[arg(long)]
        checksums: bool,
    },
    /// Fit a calibrator on the validation split.
    Fit {
        /// fc, ts, ets, cts, logit_clip, fc+ts, fc+ets or fc+cts.
        #[arg(long)]
        method: String,
    },
    /// Write calibrated probabilities for one split.
    Apply {
        #[arg(long)]
        calibrator: PathBuf,
        #[arg(long, value_enum, default_value_t = Part::Test)]
        on: Part,
    },
    /// Calibration metrics and reliability bins, vanilla or calibrated.
    Eval {
        #[arg(long)]
        calibrator: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Part::Test)]
        on: Part,
    },
    /// Metrics of feature clipping over a grid of thresholds.
    Sweep {
        /// `lo:hi:n` (inclusive, evenly spaced) or a comma list. Defaults to
        /// 40 evenly spaced thresholds up to the largest |feature|.
        #[arg(long)]
        grid: Option<String>,
        #[arg(long, value_enum, default_value_t = Part::Test)]
        on: Part,
    },
    /// High/low calibration-error group diagnostics.
    Analyze {
        #[arg(long, default_value_t = featclip::analysis::DEFAULT_TAU)]
        tau: f64,
        /// Clip threshold for the entropy table; fitted on the validation
        /// split when omitted.
        #[arg(long)]
        c: Option<f64>,
        #[arg(long, default_value_t = 50)]
        hist_bins: usize,
        /// Profile a seeded random subset of this many units instead of all.
        #[arg(long)]
        units: Option<usize>,
        /// Use |x| for profiles and histograms.
        #[arg(long)]
        abs: bool,
        /// Pool exact zeros into the sigma estimate.
        #[arg(long)]
        include_zeros: bool,
        #[arg(long, value_delimiter = ',', default_values_t = featclip::analysis::DEFAULT_THRESHOLDS)]
        thresholds: Vec<f64>,
        #[arg(long, value_enum, default_value_t = Part::Test)]
        on: Part,
    },
    /// Entropy-change curves and closed-form vs numeric derivative report.
    Theory {
        /// half_normal or rectified_mixture.
        #[arg(long, default_value = "rectified_mixture")]
        model: String,
        #[arg(long, value_delimiter = ',', default_values_t = [0.1, 0.23, 0.5, 1.0])]
        c: Vec<f64>,
        /// `lo:hi:n` or a comma list.
        #[arg(long, default_value = "0.01:3:300")]
        sigma_grid: String,
    },
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) => match e.class() {
                ErrorClass::Config => 2,
                ErrorClass::Data => 3,
                ErrorClass::Numeric => 4,
            },
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("featclip: error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
