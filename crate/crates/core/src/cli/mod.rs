//! Command-line front end.
//!
//! Exit codes: 0 success, 1 runtime failure (including any failed experiment
//! cell), 2 invalid configuration or arguments, 3 infeasible partition.
//! Data outputs start with a `#` line carrying the master seed and a hash of
//! the resolved arguments; wall-clock timings go to a separate sidecar.

mod gen;
mod metrics;
mod partition;
mod run;

use std::path::Path;

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::error::{Error, Result};

pub use gen::GenArgs;
pub use metrics::MetricsArgs;
pub use partition::{ClientEntry, PartitionArgs, PartitionFile};
pub use run::{CellResult, RunArgs, RunManifest, RunResult, Summary};

#[derive(Debug, Parser)]
#[command(name = "radfed", version, about = "Federated-learning simulator with redistribution rounds and non-IID partitioning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic Gaussian-mixture dataset.
    Gen(GenArgs),
    /// Split a labeled CSV into non-IID clients.
    Partition(PartitionArgs),
    /// Run federated experiments over seeds, folds and algorithms.
    Run(RunArgs),
    /// Export divergence series from a finished run directory.
    Metrics(MetricsArgs),
}

/// Executes a parsed command and returns the process exit code.
pub fn execute(cli: Cli) -> i32 {
    let outcome = match cli.command {
        Command::Gen(args) => gen::cmd_gen(&args).map(|_| 0),
        Command::Partition(args) => partition::cmd_partition(&args).map(|_| 0),
        Command::Run(args) => run::cmd_run(&args),
        Command::Metrics(args) => metrics::cmd_metrics(&args).map(|_| 0),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Parses `args` (including the program name) and executes.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => execute(cli),
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            code
        }
    }
}

/// Hash of a command's resolved inputs.
pub(crate) fn manifest_hash<T: Serialize>(command: &str, value: &T) -> Result<String> {
    let doc = serde_json::json!({ "command": command, "inputs": value });
    Ok(crate::io::sha256_hex(&serde_json::to_vec(&doc)?))
}

pub(crate) fn stamp(command: &str, seed: &str, manifest: &str) -> String {
    format!("# radfed {command} seed={seed} manifest={manifest}\n")
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    crate::io::write_atomic(path, &bytes)
}

/// Serializes CSV rows below a stamp line.
pub(crate) fn csv_bytes(stamp: &str, header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut out = stamp.as_bytes().to_vec();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        w.flush()?;
    }
    Ok(out)
}

pub(crate) fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub(crate) fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}
