#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! `projkit` command-line tool.

mod commands;
mod files;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use projkit::Error;

#[derive(Debug, Parser)]
#[command(name = "projkit", version, about = "Projection predictive variable selection")]
struct Cli {
    /// Worker threads (defaults to the available hardware parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Base seed for every random choice.
    #[arg(long, global = true, env = "PROJKIT_SEED", default_value_t = 0)]
    seed: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate correlated-feature data.
    Simulate(commands::SimulateArgs),
    /// Fit a reference model and export its posterior draws.
    FitRef(commands::FitRefArgs),
    /// Order features and project onto every prefix of the ordering.
    Varsel(commands::VarselArgs),
    /// Cross-validate the selection path and choose a size.
    CvVarsel(commands::CvVarselArgs),
    /// Project the reference onto a feature set.
    Project(commands::ProjectArgs),
    /// Verify the reference-model gain identities numerically.
    TheoryCheck(commands::TheoryArgs),
}

/// Shared input flags for commands that use a fitted reference.
#[derive(Debug, Args)]
pub struct RefInputs {
    /// Feature CSV with a header row.
    #[arg(long)]
    pub x: PathBuf,
    /// Response CSV with a single column.
    #[arg(long)]
    pub y: PathBuf,
    /// Reference directory written by `fit-ref`, or one holding externally
    /// produced `design.csv` and `draws.ndjson`.
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// Response family; required for external draws.
    #[arg(long)]
    pub family: Option<String>,
}

/// Error in command-line usage, reported with exit code 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

/// Numerical check that ran but failed, reported with exit code 4.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct CheckFailed(pub String);

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    if err.downcast_ref::<CheckFailed>().is_some() {
        return 4;
    }
    if let Some(e) = err.downcast_ref::<Error>() {
        return match e {
            Error::InvalidArgument(_) => 2,
            Error::Parse(_) | Error::Io(_) | Error::DimensionMismatch(_) | Error::InvalidResponse { .. } => 3,
            Error::Singular(_)
            | Error::NotConverged { .. }
            | Error::NonFinite(_)
            | Error::FoldFailures { .. }
            | Error::EmptyScreen(_) => 4,
        };
    }
    if err.downcast_ref::<std::io::Error>().is_some()
        || err.downcast_ref::<serde_json::Error>().is_some()
        || err.downcast_ref::<csv::Error>().is_some()
    {
        return 3;
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if t == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: cannot start thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match &cli.command {
        Command::Simulate(a) => commands::simulate(a, cli.seed),
        Command::FitRef(a) => commands::fit_ref(a, cli.seed),
        Command::Varsel(a) => commands::varsel(a, cli.seed),
        Command::CvVarsel(a) => commands::cv_varsel(a, cli.seed),
        Command::Project(a) => commands::project(a, cli.seed),
        Command::TheoryCheck(a) => commands::theory_check(a, cli.seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
