//! The `palps` command-line tool.
//!
//! Exit codes: 0 on success, 1 on runtime errors (bad input files, failed
//! runs), 2 on usage errors.

use std::fmt::Display;

use clap::{Parser, Subcommand};

/// `println!` that tolerates a closed standard output.
macro_rules! outln {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout().lock(), $($t)*);
    }};
}

mod config;
mod data;
mod fsio;
mod inspect;
mod runs;

pub use config::{resolve_run_config, RunFlags};
pub use fsio::{write_atomic, AtomicFile};

#[derive(Debug, Parser)]
#[command(
    name = "palps",
    version,
    about = "Point-supervised active learning for object detection"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Downsample a manifest and cut it into tiles
    Slice(data::SliceArgs),
    /// Derive RPF epsilon and alpha from a dataset's object layout
    Tune(data::TuneArgs),
    /// Run one active-learning experiment
    Run(runs::RunArgs),
    /// Run several methods over shared seeds and merge their curves
    Compare(runs::CompareArgs),
    /// Print per-image uncertainty scores under the initial model
    Score(inspect::ScoreArgs),
    /// Evaluate detections: AP at IoU 0.5 and crop-count density
    Eval(inspect::EvalArgs),
    /// Serve human-annotated runs over HTTP
    Serve(runs::ServeArgs),
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

pub(crate) fn runtime(e: impl Display) -> CliError {
    CliError::Runtime(e.to_string())
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Slice(a) => data::slice(a),
        Command::Tune(a) => data::tune(a),
        Command::Run(a) => runs::run(a),
        Command::Compare(a) => runs::compare(a),
        Command::Score(a) => inspect::score(a),
        Command::Eval(a) => inspect::eval(a),
        Command::Serve(a) => runs::serve(a),
    }
}
