use std::path::{Path, PathBuf};

use radfed::cli::{main_with_args, PartitionFile, RunResult};
use radfed::model::load_checkpoint;

fn radfed(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("radfed").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Generates a dataset and partitions it into `clients` clients.
fn setup(dir: &Path, clients: usize) -> PathBuf {
    let data = dir.join("data.csv");
    assert_eq!(radfed(&["gen", "--out", s(&data), "--samples", "400", "--seed", "2"]), 0);
    let schema = dir.join("data.csv.schema.json");
    let out = dir.join("part");
    let clients = clients.to_string();
    let code = radfed(&[
        "partition", "--input", s(&data), "--schema", s(&schema), "--clients", &clients, "--lambda", "0.5",
        "--burn-in", "500", "--steps", "2000", "--out", s(&out),
    ]);
    assert_eq!(code, 0);
    out.join("partition.json")
}

fn data_lines(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(str::to_string)
        .collect()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, body).unwrap();
    path
}

#[test]
fn partition_output_is_consistent() {
    let tmp = tempfile::tempdir().unwrap();
    let part = setup(tmp.path(), 8);
    let file = PartitionFile::load(&part).unwrap();
    assert_eq!(file.clients.len(), 8);
    let mut seen: Vec<usize> = file.clients.iter().flat_map(|c| c.sample_indices.clone()).collect();
    seen.sort_unstable();
    assert_eq!(seen, (0..400).collect::<Vec<_>>());
    for (c, row) in file.clients.iter().zip(&file.matrix) {
        assert_eq!(c.class_counts.iter().map(|&n| n as u64).collect::<Vec<_>>(), *row);
        assert_eq!(c.size, c.sample_indices.len());
    }
    assert!((0.0..=1.0).contains(&file.c_score));
    assert!(file.walk_loss.is_finite() && file.walk_loss >= 0.0);
    let (_, clients) = file.materialize().unwrap();
    assert_eq!(clients.len(), 8);
    assert_eq!(data_lines(&part.with_file_name("counts.csv")).len(), 8);
}

#[test]
fn single_cell_run_writes_one_row_per_round() {
    let tmp = tempfile::tempdir().unwrap();
    let part = setup(tmp.path(), 10);
    let config = write_config(
        tmp.path(),
        r#"{"algorithm": "fedavg", "rounds": 2, "seeds": [7], "folds": 5, "max_folds": 1}"#,
    );
    let out = tmp.path().join("run");
    assert_eq!(radfed(&["run", "--config", s(&config), "--partition", s(&part), "--out-dir", s(&out)]), 0);
    assert_eq!(data_lines(&out.join("rounds.csv")).len(), 2);
    let result: RunResult = serde_json::from_slice(&std::fs::read(out.join("result.json")).unwrap()).unwrap();
    assert_eq!(result.cells.len(), 1);
    let cell = &result.cells[0];
    assert_eq!((cell.seed, cell.rounds, cell.status.as_str()), (7, 2, "ok"));
    let best = out.join(cell.checkpoint.as_ref().unwrap());
    let model = load_checkpoint(&best.with_extension("")).unwrap();
    assert!(model.params.iter().all(|p| p.is_finite()));
}

#[test]
fn paired_algorithms_share_partition_seeds_and_folds() {
    let tmp = tempfile::tempdir().unwrap();
    let part = setup(tmp.path(), 10);
    let config = write_config(
        tmp.path(),
        r#"{"algorithm": "fedavg", "rounds": 1, "seeds": [1, 2, 3], "c_frac": 0.5, "redistribution_steps": 2}"#,
    );
    let out = tmp.path().join("run");
    let code = radfed(&[
        "run", "--config", s(&config), "--partition", s(&part), "--algorithms", "fedavg,radfed", "--out-dir", s(&out),
    ]);
    assert_eq!(code, 0);
    let result: RunResult = serde_json::from_slice(&std::fs::read(out.join("result.json")).unwrap()).unwrap();
    assert_eq!(result.partition_sha256, radfed::io::sha256_file(&part).unwrap());
    assert_eq!(result.cells.len(), 2 * 15);
    let grid = |alg: &str| {
        let mut v: Vec<(u64, usize, usize)> = result
            .cells
            .iter()
            .filter(|c| c.algorithm.to_string() == alg)
            .map(|c| (c.seed, c.test_fold, c.validation_fold.unwrap()))
            .collect();
        v.sort_unstable();
        v
    };
    assert_eq!(grid("fedavg").len(), 15);
    assert_eq!(grid("fedavg"), grid("radfed"));
    assert_eq!(result.summary.len(), 2);
    assert!(result.summary.values().all(|s| s.n == 15));
}

#[test]
fn metrics_exports_divergence_and_detects_missing_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let part = setup(tmp.path(), 10);
    let config = write_config(
        tmp.path(),
        r#"{"algorithm": "radfed", "rounds": 3, "redistribution_steps": 2, "c_frac": 0.3, "folds": 5, "max_folds": 1}"#,
    );
    let out = tmp.path().join("run");
    assert_eq!(radfed(&["run", "--config", s(&config), "--partition", s(&part), "--out-dir", s(&out)]), 0);
    assert_eq!(radfed(&["metrics", "--run-dir", s(&out)]), 0);
    // 3 rounds x 2 redistribution steps.
    assert_eq!(data_lines(&out.join("divergence.csv")).len(), 6);

    let cell_dir = std::fs::read_dir(out.join("checkpoints")).unwrap().next().unwrap().unwrap().path();
    std::fs::remove_file(cell_dir.join("round-0002.json")).unwrap();
    assert_eq!(radfed(&["metrics", "--run-dir", s(&out)]), 1);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("tiny.csv");
    assert_eq!(radfed(&["gen", "--out", s(&data), "--samples", "10"]), 0);
    let base = ["partition", "--input", s(&data), "--label-col", "label", "--out", s(tmp.path())];
    let with = |extra: &[&str]| radfed(&[&base[..], extra].concat());
    assert_eq!(with(&["--clients", "100"]), 3);
    assert_eq!(with(&["--clients", "2", "--mu=-1"]), 2);
    assert_eq!(with(&["--clients", "2", "--xi", "0"]), 2);
    assert_eq!(radfed(&["frobnicate"]), 2);

    let part = setup(tmp.path(), 4);
    let config = write_config(tmp.path(), r#"{"algorithm": "fedavg", "rounds": 1, "roundz": 2}"#);
    let out = tmp.path().join("run");
    assert_eq!(radfed(&["run", "--config", s(&config), "--partition", s(&part), "--out-dir", s(&out)]), 2);
    let missing = tmp.path().join("nope.json");
    assert_eq!(radfed(&["run", "--config", s(&config), "--partition", s(&missing), "--out-dir", s(&out)]), 2);
}

#[test]
fn seed_flag_changes_outputs_and_rerun_does_not() {
    let tmp = tempfile::tempdir().unwrap();
    let read = |name: &str| std::fs::read(tmp.path().join(name)).unwrap();
    for (name, seed) in [("a.csv", "1"), ("b.csv", "1"), ("c.csv", "2")] {
        assert_eq!(radfed(&["gen", "--out", s(&tmp.path().join(name)), "--seed", seed]), 0);
    }
    assert_eq!(read("a.csv"), read("b.csv"));
    assert_ne!(read("a.csv"), read("c.csv"));
    assert!(String::from_utf8(read("a.csv")).unwrap().starts_with("# radfed gen seed=1 manifest="));
}
