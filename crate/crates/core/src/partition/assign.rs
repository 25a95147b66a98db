use std::collections::BTreeMap;

use log::warn;
use rand::seq::SliceRandom;

use super::IntegerPartition;
use crate::data::{ClientDataset, Dataset};
use crate::error::{Error, Result};
use crate::rng::SimRng;

/// Deal the samples of each configuration out to clients according to `part`.
///
/// Within a configuration the samples are shuffled once and handed out in
/// client order, so which samples a client gets is uniform given its counts.
pub fn assign_samples(ds: &Dataset, part: &IntegerPartition, features: &[usize], rng: &mut SimRng) -> Result<Vec<ClientDataset>> {
    let mut groups: BTreeMap<Vec<usize>, Vec<usize>> = BTreeMap::new();
    for i in 0..ds.len() {
        groups.entry(ds.config_key(i, features)).or_default().push(i);
    }
    let column_of: BTreeMap<&Vec<usize>, usize> = part.columns.iter().enumerate().map(|(g, key)| (key, g)).collect();
    if let Some(key) = groups.keys().find(|k| !column_of.contains_key(k)) {
        return Err(Error::Consistency(format!("configuration {key:?} is missing from the partition")));
    }
    let clients = part.counts.len();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); clients];
    for (g, key) in part.columns.iter().enumerate() {
        let mut pool = groups.remove(key).unwrap_or_default();
        let wanted: u64 = part.counts.iter().map(|row| row[g]).sum();
        if wanted != pool.len() as u64 {
            return Err(Error::Consistency(format!(
                "configuration {key:?}: partition assigns {wanted} samples, dataset has {}",
                pool.len()
            )));
        }
        pool.shuffle(rng);
        let mut rest = pool.as_slice();
        for (t, row) in part.counts.iter().enumerate() {
            let (mine, tail) = rest.split_at(row[g] as usize);
            members[t].extend_from_slice(mine);
            rest = tail;
        }
    }
    members
        .into_iter()
        .enumerate()
        .map(|(t, mut idx)| {
            if idx.is_empty() {
                return Err(Error::Infeasible(format!("client {t} received no samples")));
            }
            idx.sort_unstable();
            Ok(ClientDataset::from_dataset(t, ds, idx))
        })
        .collect()
}

/// Mean L1 distance between each client's class ratios and the pooled ratios.
pub fn c_score(clients: &[ClientDataset]) -> Result<f64> {
    let first = clients.first().ok_or_else(|| Error::Parameter("c_score needs at least one client".into()))?;
    let k = first.n_classes;
    if clients.iter().any(|c| c.n_classes != k) {
        return Err(Error::Consistency("clients disagree on the class count".into()));
    }
    let live: Vec<&ClientDataset> = clients.iter().filter(|c| !c.is_empty()).collect();
    if live.len() < clients.len() {
        warn!("c_score: ignoring {} empty clients", clients.len() - live.len());
    }
    if live.is_empty() {
        return Err(Error::Undefined("c_score of clients with no samples".into()));
    }
    let mut pooled = vec![0usize; k];
    for c in &live {
        for (p, &n) in pooled.iter_mut().zip(&c.class_counts) {
            *p += n;
        }
    }
    let total: usize = pooled.iter().sum();
    let global: Vec<f64> = pooled.iter().map(|&n| n as f64 / total as f64).collect();
    let sum: f64 = live
        .iter()
        .map(|c| c.class_ratios().iter().zip(&global).map(|(r, g)| (r - g).abs()).sum::<f64>())
        .sum();
    Ok(sum / live.len() as f64)
}
