//! `t1moco` — batch motion correction for multi-contrast 2D image series:
//! phantom generation, pairwise registration, series correction, per-pixel
//! T1 fitting, evaluation, and ablation sweeps.
//!
//! Exit codes: 0 on success (all outputs written and finite), 2 on invalid
//! flags or configuration, 3 on I/O failure, 1 on computation failure.
//! Every failure prints one machine-readable JSON object on stderr.
//! The environment variable `T1MOCO_THREADS` caps worker threads.

/// Prints a status line to stdout, ignoring a closed pipe (e.g. `| head`).
#[macro_export]
macro_rules! outln {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

/// Prints a line to stderr, ignoring a closed pipe.
#[macro_export]
macro_rules! errln {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stderr().lock(), $($arg)*);
    }};
}

mod commands;
mod config;
mod error;
mod jsonio;

use clap::{Parser, Subcommand};

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "t1moco",
    version,
    about = "Batch motion correction for multi-contrast 2D image series",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic series with known motion and ground truth.
    Phantom(commands::phantom::PhantomArgs),
    /// Register one moving image onto one fixed image.
    Register(commands::register::RegisterArgs),
    /// Register every frame of a series to its reference frame.
    Correct(commands::correct::CorrectArgs),
    /// Fit per-pixel T1 values to a series.
    Fit(commands::fit::FitArgs),
    /// Score a correction against ground truth (Dice, Hausdorff, folding).
    Eval(commands::eval::EvalArgs),
    /// Sweep metrics against anti-folding weights and tabulate the results.
    Ablate(commands::ablate::AblateArgs),
}

/// Applies the `T1MOCO_THREADS` cap before any parallel work starts.
fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("T1MOCO_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw.trim().parse().map_err(|_| {
        CliError::Config(format!(
            "T1MOCO_THREADS must be a positive integer, got '{raw}'"
        ))
    })?;
    if threads == 0 {
        return Err(CliError::Config(
            "T1MOCO_THREADS must be a positive integer, got '0'".into(),
        ));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Config(format!("T1MOCO_THREADS: {e}")))
}

fn dispatch(command: &Command) -> Result<(), CliError> {
    match command {
        Command::Phantom(args) => commands::phantom::run(args),
        Command::Register(args) => commands::register::run(args),
        Command::Correct(args) => commands::correct::run(args),
        Command::Fit(args) => commands::fit::run(args),
        Command::Eval(args) => commands::eval::run(args),
        Command::Ablate(args) => commands::ablate::run(args),
    }
}

fn run() -> i32 {
    if let Err(e) = init_threads() {
        crate::errln!("{}", e.to_json());
        return e.exit_code();
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let err = CliError::Config(e.to_string());
            crate::errln!("{}", err.to_json());
            return err.exit_code();
        }
    };
    match dispatch(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            crate::errln!("{}", e.to_json());
            e.exit_code()
        }
    }
}

fn main() {
    std::process::exit(run());
}
