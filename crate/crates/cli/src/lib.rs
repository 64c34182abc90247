//! Command-line driver: train, evaluate, export reports and run the gradient
//! checks. [`run`] is the whole program; `main` only forwards its exit code.

pub mod commands;
pub mod config;
pub mod export;
pub mod provider;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_DIVERGED: i32 = 2;
pub const EXIT_GRADCHECK: i32 = 3;

/// A failure carrying the process exit code it maps to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<unvp::Error> for CliError {
    fn from(e: unvp::Error) -> Self {
        use unvp::Error::*;
        let code = match e {
            Diverged { .. } | TrainingDiverged { .. } | AscentDiverged { .. } | NumericOverflow { .. } => EXIT_DIVERGED,
            _ => EXIT_CONFIG,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Baseline,
    Unvp,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::Unvp => "unvp",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "unvp", version, about = "Flow-guided hard-example training for unseen-domain generalization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train on the clean source split, then evaluate every configured domain.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
        /// Output directory (defaults to `output_dir` from the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides both the dataset and training seeds.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a classifier checkpoint on every configured domain.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Directory for eval.csv (defaults to the checkpoint's directory).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Export a report.json as CSV files.
    Report {
        /// A report.json, or the run directory holding one.
        report: PathBuf,
        /// Directory for the CSV files (defaults to the report's directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Perturbs the analytic result of the named check.
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Write the configured splits and domains as checkpoint files plus a manifest.
    ExportData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Train { config, mode, out, seed } => commands::train(&config, mode, out.as_deref(), seed),
        Command::Eval { checkpoint, config, out, seed } => commands::eval(&checkpoint, &config, out.as_deref(), seed),
        Command::Report { report, out } => commands::report(&report, out.as_deref()),
        Command::Gradcheck { seed, inject_fault } => commands::gradcheck(seed, inject_fault),
        Command::ExportData { config, out, seed } => commands::export_data(&config, &out, seed),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}
