//! Command-line runner and HTTP planning service over `sofa-core`.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod panels;
pub mod service;

use std::ffi::OsString;
use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use config::RunConfig;
pub use manifest::RunManifest;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

/// Invalid invocation or configuration, reported with exit code 1.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

#[derive(Debug, Parser)]
#[command(
    name = "sofa",
    version,
    about = "Ablation outcome simulation and plan optimization"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML run configuration; flags take precedence over it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Fusion,
    ParamsOnly,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = sofa_core::synth::DEFAULT_COHORT_SIZE)]
        n: usize,
        #[arg(long)]
        beta0: Option<f64>,
        #[arg(long)]
        beta1: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the image generator.
    TrainGen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Fusion)]
        mode: Mode,
        #[arg(long)]
        epochs: Option<usize>,
        /// Trailing studies kept out of training and reported as validation.
        #[arg(long)]
        holdout: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the recurrence classifier on a frozen generator.
    TrainClf {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        generator: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Optimize the ablation parameters of one or more studies.
    Optimize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        generator: PathBuf,
        #[arg(long)]
        classifier: PathBuf,
        /// Study ids; all studies when omitted.
        #[arg(long)]
        study: Vec<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        step_size: Option<f64>,
        #[arg(long)]
        reg_weight: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate one phase and write report.json and report.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        phase: u8,
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        generator: PathBuf,
        /// Params-only generator compared against in phase 1.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        classifier: Option<PathBuf>,
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw figure panels for one study.
    Plot {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        study: String,
        #[arg(long)]
        generator: Option<PathBuf>,
        /// Output directory of an `optimize` run.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve prediction and optimization over HTTP.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        cohort: Option<PathBuf>,
        #[arg(long)]
        generator: Option<PathBuf>,
        #[arg(long)]
        classifier: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Allowed browser origin; any origin when omitted.
        #[arg(long)]
        cors_origin: Option<String>,
        /// Directory for the run manifest.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let args: Vec<String> = argv
        .iter()
        .skip(1)
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    match commands::execute(cli.command, &args) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                EXIT_USAGE
            } else {
                EXIT_FAILURE
            }
        }
    }
}
