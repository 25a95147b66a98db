use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use super::{config_err, csv_bytes, manifest_hash, stamp, write_json};
use crate::data::{load_csv, ClientDataset, Dataset, Schema};
use crate::error::{Error, Result};
use crate::partition::{partition_dataset, DirichletPriors, WalkParams};

#[derive(Debug, Clone, Args, Serialize)]
pub struct PartitionArgs {
    /// Labeled CSV file.
    #[arg(long)]
    pub input: PathBuf,
    /// Schema JSON naming label, categorical and numeric columns.
    #[arg(long, conflicts_with = "label_col")]
    pub schema: Option<PathBuf>,
    /// Label column; other columns are numeric unless listed as categorical.
    #[arg(long)]
    pub label_col: Option<String>,
    /// Categorical columns (with --label-col).
    #[arg(long, value_delimiter = ',')]
    pub categorical: Vec<String>,
    /// Categorical columns whose per-client mixes are sampled too.
    #[arg(long, value_delimiter = ',')]
    pub features: Vec<String>,
    /// Number of clients.
    #[arg(long)]
    pub clients: usize,
    /// Client-size concentration.
    #[arg(long, default_value_t = 1.0)]
    pub mu: f64,
    /// Class-mix concentration.
    #[arg(long, default_value_t = 0.1)]
    pub lambda: f64,
    /// Feature-mix concentration (required with --features).
    #[arg(long)]
    pub theta: Option<f64>,
    #[arg(long, default_value_t = 100_000)]
    pub burn_in: u64,
    #[arg(long, default_value_t = 500_000)]
    pub steps: u64,
    #[arg(long, default_value_t = 0.002)]
    pub xi: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for partition.json and counts.csv.
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientEntry {
    pub id: usize,
    pub size: usize,
    pub class_counts: Vec<usize>,
    pub sample_indices: Vec<usize>,
}

/// Contents of `partition.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionFile {
    pub manifest: String,
    pub seed: u64,
    pub input: PathBuf,
    pub input_sha256: String,
    pub schema: Schema,
    pub priors: DirichletPriors,
    pub walk: WalkParams,
    pub features: Vec<String>,
    pub columns: Vec<Vec<usize>>,
    pub column_labels: Vec<String>,
    /// Integer client x column sample counts.
    pub matrix: Vec<Vec<u64>>,
    pub c_score: f64,
    pub qp_loss: f64,
    pub walk_loss: f64,
    pub clients: Vec<ClientEntry>,
}

impl PartitionFile {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    /// Reload the source dataset, check it is unchanged and rebuild the clients.
    pub fn materialize(&self) -> Result<(Dataset, Vec<ClientDataset>)> {
        let digest = crate::io::sha256_file(&self.input)?;
        if digest != self.input_sha256 {
            return Err(Error::Consistency(format!("{} changed since it was partitioned", self.input.display())));
        }
        let ds = load_csv(&self.input, &self.schema)?;
        let clients = self
            .clients
            .iter()
            .map(|c| {
                if c.sample_indices.iter().any(|&i| i >= ds.len()) {
                    return Err(Error::Consistency(format!("client {} references missing samples", c.id)));
                }
                Ok(ClientDataset::from_dataset(c.id, &ds, c.sample_indices.clone()))
            })
            .collect::<Result<_>>()?;
        Ok((ds, clients))
    }
}

/// Header of a CSV file, skipping `#` comment lines.
fn read_header(path: &Path) -> Result<Vec<String>> {
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    Ok(reader.headers()?.iter().map(str::to_string).collect())
}

fn resolve_schema(args: &PartitionArgs) -> Result<Schema> {
    let mut schema = match (&args.schema, &args.label_col) {
        (Some(path), _) => Schema::from_json_file(path).map_err(config_err)?,
        (None, Some(label)) => {
            let header = read_header(&args.input)?;
            if !header.contains(label) {
                return Err(Error::Config(format!("label column `{label}` not in {}", args.input.display())));
            }
            let mut categorical = args.categorical.clone();
            for f in &args.features {
                if !categorical.contains(f) {
                    categorical.push(f.clone());
                }
            }
            let numeric = header.iter().filter(|h| *h != label && !categorical.contains(h)).cloned().collect();
            Schema {
                label: label.clone(),
                categorical,
                numeric,
                classes: None,
            }
        }
        (None, None) => return Err(Error::Config("either --schema or --label-col is required".into())),
    };
    if let Some(f) = args.features.iter().find(|f| !schema.categorical.contains(f)) {
        return Err(Error::Config(format!("--features column `{f}` is not categorical in the schema")));
    }
    schema.categorical.dedup();
    Ok(schema)
}

pub fn cmd_partition(args: &PartitionArgs) -> Result<()> {
    let schema = resolve_schema(args)?;
    let ds = load_csv(&args.input, &schema)?;
    let features: Vec<usize> = args
        .features
        .iter()
        .map(|f| ds.categorical_index(f).ok_or_else(|| Error::Config(format!("unknown feature `{f}`"))))
        .collect::<Result<_>>()?;
    let priors = DirichletPriors {
        mu: args.mu,
        lambda: args.lambda,
        theta: args.theta,
        clients: args.clients,
        classes: ds.n_classes(),
        feature_arities: features.iter().map(|&j| ds.categorical_levels[j].len()).collect(),
    };
    let walk = WalkParams {
        burn_in: args.burn_in,
        steps: args.steps,
        xi: args.xi,
    };
    if !(args.xi > 0.0) {
        return Err(Error::Config(format!("--xi must be positive, got {}", args.xi)));
    }
    if args.clients > ds.len() {
        log::warn!("{} clients for {} samples: some clients will receive no data", args.clients, ds.len());
    }
    let outcome = partition_dataset(&ds, &priors, &features, &walk, args.seed)?;

    let manifest = manifest_hash("partition", args)?;
    let column_labels: Vec<String> = outcome
        .integer
        .columns
        .iter()
        .map(|key| {
            let mut parts = vec![ds.class_names[key[0]].clone()];
            for (&j, &code) in features.iter().zip(&key[1..]) {
                parts.push(format!("{}={}", ds.categorical_names[j], ds.categorical_levels[j][code]));
            }
            parts.join("|")
        })
        .collect();
    let file = PartitionFile {
        manifest: manifest.clone(),
        seed: args.seed,
        input: args.input.clone(),
        input_sha256: crate::io::sha256_file(&args.input)?,
        schema,
        priors,
        walk,
        features: args.features.clone(),
        columns: outcome.integer.columns.clone(),
        column_labels,
        matrix: outcome.integer.counts.clone(),
        c_score: outcome.c_score,
        qp_loss: outcome.target.loss(&outcome.qp_solution.counts),
        walk_loss: outcome.walk.best_loss,
        clients: outcome
            .clients
            .iter()
            .map(|c| ClientEntry {
                id: c.id,
                size: c.len(),
                class_counts: c.class_counts.clone(),
                sample_indices: c.sample_indices.clone(),
            })
            .collect(),
    };

    let mut header: Vec<&str> = vec!["client"];
    header.extend(ds.class_names.iter().map(String::as_str));
    let rows: Vec<Vec<String>> = outcome
        .clients
        .iter()
        .map(|c| std::iter::once(c.id.to_string()).chain(c.class_counts.iter().map(|n| n.to_string())).collect())
        .collect();
    let counts = csv_bytes(&stamp("partition", &args.seed.to_string(), &manifest), &header, &rows)?;

    write_json(&args.out.join("partition.json"), &file)?;
    crate::io::write_atomic(&args.out.join("counts.csv"), &counts)?;
    log::info!("partitioned {} samples into {} clients (c-score {:.4})", ds.len(), args.clients, outcome.c_score);
    Ok(())
}
