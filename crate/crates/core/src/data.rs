//! Labeled datasets, per-client views, synthetic data and standardization.
//!
//! A [`Dataset`] keeps numeric columns and raw categorical codes apart so that
//! partitioning can count configurations over raw categories. One-hot
//! encoding happens when a [`ClientDataset`] is materialized.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{Purpose, Streams};

/// Column roles of an input CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub label: String,
    #[serde(default)]
    pub categorical: Vec<String>,
    #[serde(default)]
    pub numeric: Vec<String>,
    /// Closed label vocabulary. When absent, classes are the sorted distinct values.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<Vec<String>>,
}

impl Schema {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub label_name: String,
    pub class_names: Vec<String>,
    pub labels: Vec<usize>,
    pub numeric_names: Vec<String>,
    /// Row-major, `len() x numeric_names.len()`.
    pub numeric: Vec<f64>,
    pub categorical_names: Vec<String>,
    pub categorical_levels: Vec<Vec<String>>,
    /// Row-major category codes, `len() x categorical_names.len()`.
    pub categorical: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn n_numeric(&self) -> usize {
        self.numeric_names.len()
    }

    pub fn n_categorical(&self) -> usize {
        self.categorical_names.len()
    }

    /// Width of the model input: numeric columns plus one-hot categorical columns.
    pub fn n_features(&self) -> usize {
        self.n_numeric() + self.categorical_levels.iter().map(Vec::len).sum::<usize>()
    }

    pub fn numeric_row(&self, i: usize) -> &[f64] {
        let d = self.n_numeric();
        &self.numeric[i * d..(i + 1) * d]
    }

    pub fn categorical_row(&self, i: usize) -> &[usize] {
        let m = self.n_categorical();
        &self.categorical[i * m..(i + 1) * m]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes()];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    pub fn categorical_index(&self, name: &str) -> Option<usize> {
        self.categorical_names.iter().position(|n| n == name)
    }

    /// Configuration tuple of sample `i`: its class followed by the codes of
    /// the selected categorical features.
    pub fn config_key(&self, i: usize, features: &[usize]) -> Vec<usize> {
        let row = self.categorical_row(i);
        let mut key = Vec::with_capacity(1 + features.len());
        key.push(self.labels[i]);
        key.extend(features.iter().map(|&j| row[j]));
        key
    }

    /// Sample counts per configuration (`B_u`), keyed by configuration tuple.
    pub fn config_totals(&self, features: &[usize]) -> BTreeMap<Vec<usize>, u64> {
        let mut totals = BTreeMap::new();
        for i in 0..self.len() {
            *totals.entry(self.config_key(i, features)).or_insert(0) += 1;
        }
        totals
    }

    /// Numeric columns followed by one-hot encoded categorical columns.
    pub fn design_row(&self, i: usize, out: &mut Vec<f64>) {
        out.extend_from_slice(self.numeric_row(i));
        let row = self.categorical_row(i);
        for (j, levels) in self.categorical_levels.iter().enumerate() {
            for code in 0..levels.len() {
                out.push(if row[j] == code { 1.0 } else { 0.0 });
            }
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv_to(&mut buf)?;
        crate::io::write_atomic(path, &buf)
    }

    pub fn write_csv_to<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut writer = csv::Writer::from_writer(w);
        let mut header: Vec<&str> = self.numeric_names.iter().map(String::as_str).collect();
        header.extend(self.categorical_names.iter().map(String::as_str));
        header.push(&self.label_name);
        writer.write_record(&header)?;
        for i in 0..self.len() {
            let mut record: Vec<String> = self.numeric_row(i).iter().map(|v| v.to_string()).collect();
            for (j, &code) in self.categorical_row(i).iter().enumerate() {
                record.push(self.categorical_levels[j][code].clone());
            }
            record.push(self.class_names[self.labels[i]].clone());
            writer.write_record(&record)?;
        }
        writer.flush()?;
        Ok(())
    }

    /// A schema describing this dataset's columns.
    pub fn schema(&self) -> Schema {
        Schema {
            label: self.label_name.clone(),
            categorical: self.categorical_names.clone(),
            numeric: self.numeric_names.clone(),
            classes: Some(self.class_names.clone()),
        }
    }
}

/// Read a CSV file according to `schema`. Columns not named by the schema are ignored.
pub fn load_csv(path: &Path, schema: &Schema) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    load_csv_from(file, schema)
}

pub fn load_csv_from<R: std::io::Read>(input: R, schema: &Schema) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).comment(Some(b'#')).from_reader(input);
    let headers = reader.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Ingestion {
                row: 1,
                message: format!("missing column `{name}`"),
            })
    };
    let label_col = find(&schema.label)?;
    let numeric_cols: Vec<usize> = schema.numeric.iter().map(|n| find(n)).collect::<Result<_>>()?;
    let cat_cols: Vec<usize> = schema.categorical.iter().map(|n| find(n)).collect::<Result<_>>()?;

    let mut raw_labels = Vec::new();
    let mut raw_cats: Vec<Vec<String>> = Vec::new();
    let mut numeric = Vec::new();
    for (r, record) in reader.records().enumerate() {
        // header is row 1; comment lines shift the physical line
        let record = record.map_err(|e| Error::Ingestion {
            row: r + 2,
            message: e.to_string(),
        })?;
        let row = record.position().map_or(r + 2, |p| p.line() as usize);
        let cell = |c: usize| {
            record.get(c).ok_or_else(|| Error::Ingestion {
                row,
                message: format!("missing cell in column {}", c + 1),
            })
        };
        for (&c, name) in numeric_cols.iter().zip(&schema.numeric) {
            let text = cell(c)?.trim();
            let v: f64 = text.parse().map_err(|_| Error::Ingestion {
                row,
                message: format!("column `{name}`: cannot parse `{text}` as a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Ingestion {
                    row,
                    message: format!("column `{name}`: non-finite value `{text}`"),
                });
            }
            numeric.push(v);
        }
        raw_cats.push(cat_cols.iter().map(|&c| cell(c).map(|s| s.trim().to_string())).collect::<Result<_>>()?);
        raw_labels.push((row, cell(label_col)?.trim().to_string()));
    }

    let class_names: Vec<String> = match &schema.classes {
        Some(classes) => classes.clone(),
        None => raw_labels.iter().map(|(_, l)| l.clone()).collect::<BTreeSet<_>>().into_iter().collect(),
    };
    let class_index: BTreeMap<&str, usize> = class_names.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let labels = raw_labels
        .iter()
        .map(|(row, l)| {
            class_index.get(l.as_str()).copied().ok_or_else(|| Error::Ingestion {
                row: *row,
                message: format!("unknown label value `{l}`"),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut categorical_levels = Vec::with_capacity(cat_cols.len());
    for j in 0..cat_cols.len() {
        let levels: BTreeSet<&str> = raw_cats.iter().map(|r| r[j].as_str()).collect();
        categorical_levels.push(levels.into_iter().map(str::to_string).collect::<Vec<_>>());
    }
    let mut categorical = Vec::with_capacity(raw_cats.len() * cat_cols.len());
    for r in &raw_cats {
        for (j, v) in r.iter().enumerate() {
            categorical.push(categorical_levels[j].binary_search(v).expect("level collected above"));
        }
    }

    Ok(Dataset {
        label_name: schema.label.clone(),
        class_names,
        labels,
        numeric_names: schema.numeric.clone(),
        numeric,
        categorical_names: schema.categorical.clone(),
        categorical_levels,
        categorical,
    })
}

/// Isotropic unit-variance Gaussian blobs; class `c` is centred at
/// `c * separation` along the all-ones diagonal, so consecutive class means are
/// exactly `separation` apart. Labels are drawn uniformly.
pub fn synth_gaussian_mixture(
    n_classes: usize,
    n_features: usize,
    separation: f64,
    n_samples: usize,
    seed: u64,
) -> Result<Dataset> {
    if n_classes < 2 || n_features < 1 {
        return Err(Error::Parameter("need at least 2 classes and 1 feature".into()));
    }
    if !(separation > 0.0) {
        return Err(Error::Parameter(format!("separation must be positive, got {separation}")));
    }
    let mut rng = Streams::new(seed).stream(Purpose::Synthetic, &[0]);
    let step = separation / (n_features as f64).sqrt();
    let mut labels = Vec::with_capacity(n_samples);
    let mut numeric = Vec::with_capacity(n_samples * n_features);
    for _ in 0..n_samples {
        let y = rng.random_range(0..n_classes);
        labels.push(y);
        let centre = y as f64 * step;
        for _ in 0..n_features {
            let z: f64 = rng.sample(StandardNormal);
            numeric.push(centre + z);
        }
    }
    Ok(Dataset {
        label_name: "label".into(),
        class_names: (0..n_classes).map(|c| c.to_string()).collect(),
        labels,
        numeric_names: (0..n_features).map(|j| format!("x{j}")).collect(),
        numeric,
        categorical_names: Vec::new(),
        categorical_levels: Vec::new(),
        categorical: Vec::new(),
    })
}

/// Append `count` categorical columns with `levels` uniformly drawn categories each.
pub fn add_random_categories(ds: &mut Dataset, count: usize, levels: usize, seed: u64) -> Result<()> {
    if count == 0 {
        return Ok(());
    }
    if levels < 2 {
        return Err(Error::Parameter("categorical features need at least 2 levels".into()));
    }
    let mut rng = Streams::new(seed).stream(Purpose::Synthetic, &[1]);
    let old = ds.n_categorical();
    let width = old + count;
    let mut codes = Vec::with_capacity(ds.len() * width);
    for i in 0..ds.len() {
        codes.extend_from_slice(ds.categorical_row(i));
        for _ in 0..count {
            codes.push(rng.random_range(0..levels));
        }
    }
    for j in 0..count {
        ds.categorical_names.push(format!("c{}", old + j));
        ds.categorical_levels.push((0..levels).map(|l| format!("v{l}")).collect());
    }
    ds.categorical = codes;
    Ok(())
}

/// One client's local data.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub id: usize,
    /// Row-major design matrix, `len() x n_features`.
    pub features: Vec<f64>,
    pub n_features: usize,
    /// Leading columns that hold numeric (standardizable) features.
    pub n_numeric: usize,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    /// Positions of this client's samples in the source dataset.
    pub sample_indices: Vec<usize>,
    pub class_counts: Vec<usize>,
    pub feature_category_counts: Vec<Vec<usize>>,
}

impl ClientDataset {
    /// Build from raw parts; all columns are treated as numeric.
    pub fn new(id: usize, features: Vec<f64>, n_features: usize, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Consistency(format!("client {id} has no samples")));
        }
        if features.len() != labels.len() * n_features {
            return Err(Error::Consistency(format!(
                "client {id}: {} feature values for {} samples of width {n_features}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(Error::Consistency(format!("client {id}: label {y} out of range")));
        }
        let mut class_counts = vec![0; n_classes];
        for &y in &labels {
            class_counts[y] += 1;
        }
        Ok(Self {
            id,
            features,
            n_features,
            n_numeric: n_features,
            sample_indices: (0..labels.len()).collect(),
            labels,
            n_classes,
            class_counts,
            feature_category_counts: Vec::new(),
        })
    }

    /// Materialize the samples `indices` of `ds` (one-hot encoding categoricals).
    pub fn from_dataset(id: usize, ds: &Dataset, indices: Vec<usize>) -> Self {
        let n_features = ds.n_features();
        let mut features = Vec::with_capacity(indices.len() * n_features);
        let mut labels = Vec::with_capacity(indices.len());
        let mut class_counts = vec![0; ds.n_classes()];
        let mut feature_category_counts: Vec<Vec<usize>> = ds.categorical_levels.iter().map(|l| vec![0; l.len()]).collect();
        for &i in &indices {
            ds.design_row(i, &mut features);
            labels.push(ds.labels[i]);
            class_counts[ds.labels[i]] += 1;
            for (j, &code) in ds.categorical_row(i).iter().enumerate() {
                feature_category_counts[j][code] += 1;
            }
        }
        Self {
            id,
            features,
            n_features,
            n_numeric: ds.n_numeric(),
            labels,
            n_classes: ds.n_classes(),
            sample_indices: indices,
            class_counts,
            feature_category_counts,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    /// Class ratios `r_c`; all zeros for an empty client.
    pub fn class_ratios(&self) -> Vec<f64> {
        let n = self.len() as f64;
        self.class_counts.iter().map(|&c| if n > 0.0 { c as f64 / n } else { 0.0 }).collect()
    }
}

/// Pool the samples of several clients into one (id of the first client).
pub fn pool_clients(clients: &[&ClientDataset]) -> Result<ClientDataset> {
    let first = clients.first().ok_or_else(|| Error::Parameter("no clients to pool".into()))?;
    let mut pooled = ClientDataset {
        id: first.id,
        features: Vec::new(),
        n_features: first.n_features,
        n_numeric: first.n_numeric,
        labels: Vec::new(),
        n_classes: first.n_classes,
        sample_indices: Vec::new(),
        class_counts: vec![0; first.n_classes],
        feature_category_counts: first.feature_category_counts.iter().map(|v| vec![0; v.len()]).collect(),
    };
    for c in clients {
        if c.n_features != pooled.n_features || c.n_classes != pooled.n_classes {
            return Err(Error::Consistency("clients disagree on feature width or class count".into()));
        }
        pooled.features.extend_from_slice(&c.features);
        pooled.labels.extend_from_slice(&c.labels);
        pooled.sample_indices.extend_from_slice(&c.sample_indices);
        for (a, b) in pooled.class_counts.iter_mut().zip(&c.class_counts) {
            *a += b;
        }
        for (pa, pb) in pooled.feature_category_counts.iter_mut().zip(&c.feature_category_counts) {
            for (a, b) in pa.iter_mut().zip(pb) {
                *a += b;
            }
        }
    }
    Ok(pooled)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    #[default]
    Global,
    Local,
    /// Leave features untouched.
    None,
}

/// Per-feature centring and scaling for the numeric columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub scope: Scope,
}

impl StandardizationStats {
    /// Population statistics over the first `n_numeric` columns of the given rows.
    /// Zero-variance columns get a standard deviation of 1.
    pub fn fit<'a>(rows: impl Iterator<Item = &'a [f64]> + Clone, n_numeric: usize, scope: Scope) -> Option<Self> {
        let mut count = 0usize;
        let mut mean = vec![0.0; n_numeric];
        for r in rows.clone() {
            count += 1;
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        if count == 0 {
            return None;
        }
        for m in &mut mean {
            *m /= count as f64;
        }
        let mut var = vec![0.0; n_numeric];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / count as f64).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Some(Self { mean, std, scope })
    }

    pub fn apply(&self, features: &mut [f64], n_features: usize) {
        for row in features.chunks_mut(n_features) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
    }
}

fn client_rows(c: &ClientDataset) -> impl Iterator<Item = &[f64]> + Clone {
    c.features.chunks(c.n_features.max(1))
}

/// Standardize numeric columns in place.
///
/// `Global` fits one set of statistics on the clients at positions `train`
/// and applies it to every client; `Local` fits and applies per client.
/// Returns the fitted statistics (one entry for global, one per client for local).
pub fn standardize(clients: &mut [ClientDataset], train: &[usize], scope: Scope) -> Vec<StandardizationStats> {
    let n_numeric = clients.first().map_or(0, |c| c.n_numeric);
    if n_numeric == 0 || scope == Scope::None {
        if n_numeric == 0 && scope != Scope::None {
            log::warn!("standardize: no numeric features, nothing to do");
        }
        return Vec::new();
    }
    match scope {
        Scope::Global => {
            let pool: Vec<&ClientDataset> = train.iter().map(|&i| &clients[i]).collect();
            let rows = pool.iter().flat_map(|c| client_rows(c));
            let Some(stats) = StandardizationStats::fit(rows, n_numeric, Scope::Global) else {
                return Vec::new();
            };
            for c in clients.iter_mut() {
                stats.apply(&mut c.features, c.n_features);
            }
            vec![stats]
        }
        Scope::Local => clients
            .iter_mut()
            .filter_map(|c| {
                let stats = StandardizationStats::fit(client_rows(c), n_numeric, Scope::Local)?;
                stats.apply(&mut c.features, c.n_features);
                Some(stats)
            })
            .collect(),
        Scope::None => unreachable!(),
    }
}
