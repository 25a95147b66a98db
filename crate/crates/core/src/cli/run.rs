use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use super::partition::PartitionFile;
use super::{config_err, csv_bytes, fmt_opt, manifest_hash, stamp, write_json};
use crate::data::ClientDataset;
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::fedcore::{make_folds, run_experiment_with, Algorithm, FederatedConfig, FoldData, FoldSplit, RoundRecord};
use crate::model::save_checkpoint;
use crate::rng::{derive_seed, Purpose, Streams};

#[derive(Debug, Clone, Args, Serialize)]
pub struct RunArgs {
    /// Experiment manifest (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// partition.json written by `partition`.
    #[arg(long)]
    pub partition: PathBuf,
    /// Run a single algorithm instead of the manifest's.
    #[arg(long, conflicts_with = "algorithms")]
    pub algorithm: Option<String>,
    /// Comma-separated algorithms sharing partitions and seeds.
    #[arg(long, value_delimiter = ',')]
    pub algorithms: Vec<String>,
    /// Run a single seed instead of the manifest's list.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip)]
    pub out_dir: PathBuf,
}

fn default_folds() -> usize {
    5
}
fn default_true() -> bool {
    true
}

/// Experiment manifest: a federated configuration plus the grid around it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    #[serde(flatten)]
    pub federated: FederatedConfig,
    /// Seeds of the grid; defaults to `[seed]`.
    #[serde(default)]
    pub seeds: Vec<u64>,
    /// Algorithms of the grid; defaults to `[algorithm]`.
    #[serde(default)]
    pub algorithms: Vec<Algorithm>,
    #[serde(default = "default_folds")]
    pub folds: usize,
    /// One validation fold per test fold, or every other fold.
    #[serde(default)]
    pub nested: bool,
    /// Only the first `max_folds` splits are run.
    #[serde(default)]
    pub max_folds: Option<usize>,
    #[serde(default)]
    pub fold_seed: u64,
    /// Save the global model after every round (needed by `metrics`).
    #[serde(default = "default_true")]
    pub round_checkpoints: bool,
}

impl RunManifest {
    /// Parses a manifest, rejecting keys no field accepts.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(config_err)?;
        let manifest: RunManifest = serde_json::from_value(value.clone()).map_err(config_err)?;
        let known = serde_json::to_value(&manifest)?;
        if let (Some(given), Some(known)) = (value.as_object(), known.as_object()) {
            if let Some(key) = given.keys().find(|k| !known.contains_key(*k)) {
                return Err(Error::Config(format!("unknown manifest field `{key}`")));
            }
        }
        Ok(manifest)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub seed: u64,
    pub fold: usize,
    pub test_fold: usize,
    pub validation_fold: Option<usize>,
    pub algorithm: Algorithm,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub test_metric: Option<f64>,
    pub best_validation: Option<f64>,
    pub best_round: Option<usize>,
    pub rounds: usize,
    pub checkpoint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: Option<f64>,
    pub stdev: Option<f64>,
}

/// Contents of `result.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub manifest: String,
    pub partition_sha256: String,
    pub seeds: Vec<u64>,
    pub metric: crate::metrics::Metric,
    pub algorithms: Vec<Algorithm>,
    pub round_checkpoints: bool,
    pub cells: Vec<CellResult>,
    pub failed_cells: usize,
    pub summary: BTreeMap<String, Summary>,
}

pub(crate) fn cell_dir_name(algorithm: Algorithm, seed: u64, fold: usize) -> String {
    format!("{algorithm}-s{seed}-f{fold}")
}

pub(crate) fn round_stem(run_dir: &Path, cell: &str, round: usize) -> PathBuf {
    run_dir.join("checkpoints").join(cell).join(format!("round-{round:04}"))
}

struct Cell {
    seed: u64,
    fold: usize,
    split: FoldSplit,
    algorithm: Algorithm,
}

struct CellOutput {
    records: Vec<RoundRecord>,
    result: CellResult,
}

fn summarize(values: &[f64]) -> Summary {
    let n = values.len();
    if n == 0 {
        return Summary { n, mean: None, stdev: None };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let stdev = if n > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Summary {
        n,
        mean: Some(mean),
        stdev: Some(stdev),
    }
}

fn run_cell(cell: &Cell, manifest: &RunManifest, clients: &[ClientDataset], out_dir: &Path, exec: Executor) -> CellOutput {
    let name = cell_dir_name(cell.algorithm, cell.seed, cell.fold);
    let cfg = FederatedConfig {
        algorithm: cell.algorithm,
        seed: derive_seed(cell.seed, Purpose::Folds, &[cell.fold as u64]),
        ..manifest.federated.clone()
    };
    let mut result = CellResult {
        seed: cell.seed,
        fold: cell.fold,
        test_fold: cell.split.test_fold,
        validation_fold: cell.split.validation_fold,
        algorithm: cell.algorithm,
        status: "ok".into(),
        error: None,
        test_metric: None,
        best_validation: None,
        best_round: None,
        rounds: 0,
        checkpoint: None,
    };
    let mut records = Vec::new();
    let outcome = FoldData::prepare(clients, &cell.split, cfg.standardization).and_then(|fold| {
        let (train, val, test) = (FoldData::refs(&fold.train), FoldData::refs(&fold.validation), FoldData::refs(&fold.test));
        let mut hook = |record: &RoundRecord, model: &crate::model::ModelState| {
            if manifest.round_checkpoints {
                save_checkpoint(model, &round_stem(out_dir, &name, record.round))?;
            }
            Ok(())
        };
        run_experiment_with(&cfg, &train, &val, &test, exec, &mut hook)
    });
    match outcome.and_then(|out| {
        let stem = out_dir.join("checkpoints").join(&name).join("best");
        save_checkpoint(&out.best_model, &stem)?;
        Ok((out, stem))
    }) {
        Ok((out, stem)) => {
            result.test_metric = out.test_metric;
            result.best_validation = out.best_validation;
            result.best_round = Some(out.best_round);
            result.rounds = out.records.len();
            result.checkpoint = stem.strip_prefix(out_dir).ok().map(|p| p.display().to_string());
            records = out.records;
        }
        Err(e) => {
            log::error!("cell {name} failed: {e}");
            result.status = "failed".into();
            result.error = Some(e.to_string());
        }
    }
    CellOutput { records, result }
}

fn selected_field(steps: &[Vec<usize>]) -> String {
    steps
        .iter()
        .map(|s| s.iter().map(|id| id.to_string()).collect::<Vec<_>>().join(" "))
        .collect::<Vec<_>>()
        .join(";")
}

/// Runs the grid; returns 1 when any cell failed.
pub fn cmd_run(args: &RunArgs) -> Result<i32> {
    let text = std::fs::read_to_string(&args.config).map_err(|e| Error::Config(format!("{}: {e}", args.config.display())))?;
    let mut manifest = RunManifest::from_json(&text)?;
    if let Some(a) = &args.algorithm {
        manifest.algorithms = vec![a.parse()?];
    } else if !args.algorithms.is_empty() {
        manifest.algorithms = args.algorithms.iter().map(|a| a.parse()).collect::<Result<_>>()?;
    }
    if manifest.algorithms.is_empty() {
        manifest.algorithms = vec![manifest.federated.algorithm];
    }
    if let Some(seed) = args.seed {
        manifest.seeds = vec![seed];
    }
    if manifest.seeds.is_empty() {
        manifest.seeds = vec![manifest.federated.seed];
    }
    for &algorithm in &manifest.algorithms {
        FederatedConfig {
            algorithm,
            ..manifest.federated.clone()
        }
        .validate()?;
    }

    let partition_bytes = std::fs::read(&args.partition).map_err(|e| Error::Config(format!("{}: {e}", args.partition.display())))?;
    let partition: PartitionFile = serde_json::from_slice(&partition_bytes).map_err(config_err)?;
    let (_, clients) = partition.materialize()?;
    let ids: Vec<usize> = clients.iter().map(|c| c.id).collect();
    let mut fold_rng = Streams::new(manifest.fold_seed).stream(Purpose::Folds, &[]);
    let mut splits = make_folds(&ids, manifest.folds, manifest.nested, &mut fold_rng).map_err(config_err)?;
    if let Some(limit) = manifest.max_folds {
        splits.truncate(limit.max(1));
    }

    let partition_sha256 = crate::io::sha256_hex(&partition_bytes);
    let manifest_digest = manifest_hash("run", &(&manifest, &partition_sha256))?;
    let mut cells = Vec::new();
    for &seed in &manifest.seeds {
        for (fold, split) in splits.iter().enumerate() {
            for &algorithm in &manifest.algorithms {
                cells.push(Cell {
                    seed,
                    fold,
                    split: split.clone(),
                    algorithm,
                });
            }
        }
    }

    let exec = Executor::from_env();
    let inner = if cells.len() > 1 { Executor::Sequential } else { exec };
    let outputs = exec.map(cells.iter().collect(), |cell| run_cell(cell, &manifest, &clients, &args.out_dir, inner));

    let mut round_rows = Vec::new();
    let mut step_rows = Vec::new();
    let mut timing = Vec::new();
    for out in &outputs {
        let c = &out.result;
        let key = [c.seed.to_string(), c.fold.to_string(), c.algorithm.to_string()];
        for r in &out.records {
            let dl: Vec<f64> = r.dl.iter().flatten().copied().collect();
            let mean_dl = (!dl.is_empty()).then(|| dl.iter().sum::<f64>() / dl.len() as f64);
            let mut row = key.to_vec();
            row.extend([
                r.round.to_string(),
                fmt_opt(r.validation_loss),
                fmt_opt(r.validation_metric),
                fmt_opt(r.dc),
                fmt_opt(r.dc_distance),
                fmt_opt(mean_dl),
                selected_field(&r.selected),
            ]);
            round_rows.push(row);
            for (s, (dl, sel)) in r.dl.iter().zip(&r.selected).enumerate() {
                let mut row = key.to_vec();
                row.extend([r.round.to_string(), (s + 1).to_string(), fmt_opt(*dl), selected_field(std::slice::from_ref(sel))]);
                step_rows.push(row);
            }
        }
        timing.push(serde_json::json!({
            "seed": c.seed,
            "fold": c.fold,
            "algorithm": c.algorithm,
            "round_secs": out.records.iter().map(|r| r.duration_secs).collect::<Vec<_>>(),
        }));
    }

    let results: Vec<CellResult> = outputs.into_iter().map(|o| o.result).collect();
    let failed_cells = results.iter().filter(|c| c.status != "ok").count();
    let summary = manifest
        .algorithms
        .iter()
        .map(|a| {
            let values: Vec<f64> = results.iter().filter(|c| c.algorithm == *a).filter_map(|c| c.test_metric).collect();
            (a.to_string(), summarize(&values))
        })
        .collect();
    let seeds_text = manifest.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",");
    let head = stamp("run", &seeds_text, &manifest_digest);
    let rounds_csv = csv_bytes(
        &head,
        &["seed", "fold", "algorithm", "round", "validation_loss", "validation_metric", "dc", "dc_distance", "mean_dl", "selected"],
        &round_rows,
    )?;
    let steps_csv = csv_bytes(&head, &["seed", "fold", "algorithm", "round", "step", "dl", "selected"], &step_rows)?;
    let result = RunResult {
        manifest: manifest_digest,
        partition_sha256,
        seeds: manifest.seeds.clone(),
        metric: manifest.federated.metric,
        algorithms: manifest.algorithms.clone(),
        round_checkpoints: manifest.round_checkpoints,
        cells: results,
        failed_cells,
        summary,
    };
    crate::io::write_atomic(&args.out_dir.join("rounds.csv"), &rounds_csv)?;
    crate::io::write_atomic(&args.out_dir.join("steps.csv"), &steps_csv)?;
    write_json(&args.out_dir.join("result.json"), &result)?;
    write_json(&args.out_dir.join("timing.json"), &serde_json::json!({ "cells": timing }))?;
    if failed_cells > 0 {
        eprintln!("{failed_cells} of {} cells failed", result.cells.len());
        return Ok(1);
    }
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_defaults_and_unknown_fields() {
        let m = RunManifest::from_json(r#"{"algorithm": "radfed", "rounds": 3, "seeds": [1, 2]}"#).unwrap();
        assert_eq!(m.folds, 5);
        assert!(m.round_checkpoints);
        assert_eq!(m.federated.rounds, 3);
        let err = RunManifest::from_json(r#"{"algorithm": "radfed", "rounds": 3, "sedes": [1]}"#).unwrap_err();
        assert!(err.to_string().contains("sedes"));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn summary_statistics() {
        let s = summarize(&[1.0, 2.0, 3.0]);
        assert_eq!((s.n, s.mean, s.stdev), (3, Some(2.0), Some(1.0)));
        assert_eq!(summarize(&[]).mean, None);
    }
}
