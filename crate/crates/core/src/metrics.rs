//! Divergence diagnostics and task metrics.

use serde::{Deserialize, Serialize};

use crate::data::ClientDataset;
use crate::error::{Error, Result};
use crate::model::{predict_proba, ModelState};

/// Signed relative difference of norms, `(|w_fl| - |w_c|) / |w_c|`.
///
/// This compares norms only: `w_fl = -w_c` scores 0. See [`dc_distance`].
pub fn dc_divergence(w_fl: &ModelState, w_c: &ModelState) -> Result<f64> {
    let base = w_c.norm();
    if base == 0.0 {
        return Err(Error::Undefined("centralized model has zero norm".into()));
    }
    Ok((w_fl.norm() - base) / base)
}

/// `|w_fl - w_c| / |w_c|`, a true distance recorded next to [`dc_divergence`].
pub fn dc_distance(w_fl: &ModelState, w_c: &ModelState) -> Result<f64> {
    let base = w_c.norm();
    if base == 0.0 {
        return Err(Error::Undefined("centralized model has zero norm".into()));
    }
    let diff: f64 = w_fl.params.iter().zip(&w_c.params).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(diff.sqrt() / base)
}

/// Mean over unordered pairs of `1 - cos(w_i, w_j)`.
pub fn dl_divergence(models: &[ModelState]) -> Result<f64> {
    if models.len() < 2 {
        return Err(Error::Parameter("dl_divergence needs at least two models".into()));
    }
    let norms: Vec<f64> = models.iter().map(ModelState::norm).collect();
    if norms.contains(&0.0) {
        return Err(Error::Undefined("a local model has zero norm".into()));
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..models.len() {
        for j in i + 1..models.len() {
            let dot: f64 = models[i].params.iter().zip(&models[j].params).map(|(a, b)| a * b).sum();
            let cos = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            sum += 1.0 - cos;
            pairs += 1;
        }
    }
    Ok(sum / pairs as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Accuracy,
    F1,
    Auc,
}

pub fn accuracy(predicted: &[usize], labels: &[usize]) -> Result<f64> {
    if labels.is_empty() || predicted.len() != labels.len() {
        return Err(Error::Parameter("accuracy needs matching, nonempty predictions".into()));
    }
    let hits = predicted.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// F1 of the positive class (label 1); 0 when it is undefined.
pub fn f1_score(predicted: &[usize], labels: &[usize]) -> Result<f64> {
    if labels.is_empty() || predicted.len() != labels.len() {
        return Err(Error::Parameter("f1 needs matching, nonempty predictions".into()));
    }
    let (mut tp, mut fp, mut fne) = (0usize, 0usize, 0usize);
    for (&p, &y) in predicted.iter().zip(labels) {
        match (p == 1, y == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fne += 1,
            _ => {}
        }
    }
    let denom = 2 * tp + fp + fne;
    Ok(if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 })
}

/// Area under the ROC curve from average ranks (ties count one half).
pub fn auc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Parameter("auc needs one score per label".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::numeric("NaN score"));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Undefined("auc of a single-class sample".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their average
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Metric over the pooled samples of `clients`.
pub fn evaluate(model: &ModelState, clients: &[&ClientDataset], metric: Metric) -> Result<f64> {
    let mut predicted = Vec::new();
    let mut positive = Vec::new();
    let mut labels = Vec::new();
    let mut probs = Vec::new();
    for c in clients {
        for i in 0..c.len() {
            predict_proba(model, c.row(i), &mut probs);
            let mut best = 0;
            for (k, &p) in probs.iter().enumerate() {
                if p > probs[best] {
                    best = k;
                }
            }
            predicted.push(best);
            positive.push(probs.get(1).copied().unwrap_or(0.0));
            labels.push(c.labels[i]);
        }
    }
    if labels.is_empty() {
        return Err(Error::Undefined("no samples to evaluate".into()));
    }
    match metric {
        Metric::Accuracy => accuracy(&predicted, &labels),
        Metric::F1 => f1_score(&predicted, &labels),
        Metric::Auc => auc(&positive, &labels),
    }
}

/// DC values per round and DL values per (round, step).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DivergenceTrace {
    pub dc: Vec<Option<f64>>,
    pub dc_distance: Vec<Option<f64>>,
    pub dl: Vec<Vec<Option<f64>>>,
}

impl DivergenceTrace {
    pub fn from_records(records: &[crate::fedcore::RoundRecord]) -> Self {
        Self {
            dc: records.iter().map(|r| r.dc).collect(),
            dc_distance: records.iter().map(|r| r.dc_distance).collect(),
            dl: records.iter().map(|r| r.dl.clone()).collect(),
        }
    }
}

/// Federated run with a centralized twin trained side by side from the same
/// initialization on the data of each round's participating clients.
pub fn centralized_twin_run(cfg: &crate::fedcore::FederatedConfig, clients: &[ClientDataset], exec: crate::exec::Executor) -> Result<DivergenceTrace> {
    let cfg = crate::fedcore::FederatedConfig {
        track_dc: true,
        ..cfg.clone()
    };
    let train: Vec<&ClientDataset> = clients.iter().collect();
    let out = crate::fedcore::run_experiment(&cfg, &train, &[], &[], exec)?;
    Ok(DivergenceTrace::from_records(&out.records))
}
