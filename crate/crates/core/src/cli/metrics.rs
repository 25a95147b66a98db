use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};

use super::run::{cell_dir_name, round_stem, RunResult};
use super::{csv_bytes, manifest_hash, stamp};
use crate::error::{Error, Result};
use crate::fedcore::Algorithm;
use crate::model::load_checkpoint;

#[derive(Debug, Clone, Args, Serialize)]
pub struct MetricsArgs {
    /// Directory written by `run`.
    #[arg(long)]
    pub run_dir: PathBuf,
    /// Output path (default: `<run-dir>/divergence.csv`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
struct RoundRow {
    seed: u64,
    fold: usize,
    algorithm: Algorithm,
    round: usize,
    dc: Option<f64>,
    dc_distance: Option<f64>,
}

#[derive(Debug, Deserialize)]
struct StepRow {
    seed: u64,
    fold: usize,
    algorithm: Algorithm,
    round: usize,
    step: usize,
    dl: Option<f64>,
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &std::path::Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Err(Error::Consistency(format!("{} is missing", path.display())));
    }
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    reader.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// Writes one row per (cell, round, step) with DL, the round's DC values and
/// the norm of the saved global model.
pub fn cmd_metrics(args: &MetricsArgs) -> Result<()> {
    let result_path = args.run_dir.join("result.json");
    let result: RunResult = serde_json::from_slice(
        &std::fs::read(&result_path).map_err(|e| Error::Consistency(format!("{}: {e}", result_path.display())))?,
    )?;
    let rounds: Vec<RoundRow> = read_rows(&args.run_dir.join("rounds.csv"))?;
    let steps: Vec<StepRow> = read_rows(&args.run_dir.join("steps.csv"))?;

    type Key = (u64, usize, Algorithm, usize);
    let round_info: BTreeMap<Key, &RoundRow> = rounds.iter().map(|r| ((r.seed, r.fold, r.algorithm, r.round), r)).collect();

    let mut norms: BTreeMap<Key, f64> = BTreeMap::new();
    let mut missing = Vec::new();
    for cell in result.cells.iter().filter(|c| c.status == "ok") {
        let name = cell_dir_name(cell.algorithm, cell.seed, cell.fold);
        let best = args.run_dir.join("checkpoints").join(&name).join("best.json");
        if !best.exists() {
            missing.push(format!("{name}: best checkpoint"));
        }
        let recorded = round_info.keys().filter(|k| (k.0, k.1, k.2) == (cell.seed, cell.fold, cell.algorithm)).count();
        if recorded != cell.rounds {
            missing.push(format!("{name}: {} of {} rounds in rounds.csv", recorded, cell.rounds));
        }
        if !result.round_checkpoints {
            continue;
        }
        let mut absent = Vec::new();
        for round in 1..=cell.rounds {
            let stem = round_stem(&args.run_dir, &name, round);
            match load_checkpoint(&stem) {
                Ok(model) => {
                    norms.insert((cell.seed, cell.fold, cell.algorithm, round), model.norm());
                }
                Err(_) => absent.push(round.to_string()),
            }
        }
        if !absent.is_empty() {
            missing.push(format!("{name}: rounds {}", absent.join(",")));
        }
    }
    if !missing.is_empty() {
        return Err(Error::Consistency(format!("missing checkpoints: {}", missing.join("; "))));
    }

    let rows: Vec<Vec<String>> = steps
        .iter()
        .map(|s| {
            let key = (s.seed, s.fold, s.algorithm, s.round);
            let info = round_info.get(&key);
            vec![
                s.seed.to_string(),
                s.fold.to_string(),
                s.algorithm.to_string(),
                s.round.to_string(),
                s.step.to_string(),
                super::fmt_opt(s.dl),
                super::fmt_opt(info.and_then(|r| r.dc)),
                super::fmt_opt(info.and_then(|r| r.dc_distance)),
                super::fmt_opt(norms.get(&key).copied()),
            ]
        })
        .collect();
    let seeds = result.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",");
    let inputs = (
        &result.manifest,
        crate::io::sha256_file(&args.run_dir.join("rounds.csv"))?,
        crate::io::sha256_file(&args.run_dir.join("steps.csv"))?,
    );
    let manifest = manifest_hash("metrics", &inputs)?;
    let bytes = csv_bytes(
        &stamp("metrics", &seeds, &manifest),
        &["seed", "fold", "algorithm", "round", "step", "dl", "dc", "dc_distance", "global_norm"],
        &rows,
    )?;
    let out = args.out.clone().unwrap_or_else(|| args.run_dir.join("divergence.csv"));
    crate::io::write_atomic(&out, &bytes)
}
