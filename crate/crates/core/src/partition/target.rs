use std::collections::BTreeMap;

use super::dirichlet::sample_dirichlet;
use super::{DirichletPriors, Grid};
use crate::error::{Error, Result};
use crate::rng::{Purpose, Streams};

/// One family of marginal targets: every column belongs to one bin, and for
/// each client the column mass aggregated per bin should match `targets`.
///
/// The class/size program is a single group whose bins are the columns
/// themselves; the feature program adds one group per categorical feature.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalGroup {
    pub column_bins: Vec<usize>,
    /// Clients x bins.
    pub targets: Grid,
}

impl MarginalGroup {
    fn bin_count(&self) -> usize {
        self.targets.cols()
    }

    fn largest_bin(&self) -> usize {
        let mut sizes = vec![0usize; self.bin_count()];
        for &b in &self.column_bins {
            sizes[b] += 1;
        }
        sizes.into_iter().max().unwrap_or(0)
    }

    /// Per-client mass aggregated into this group's bins.
    pub fn bin_sums(&self, counts: &Grid) -> Grid {
        let mut sums = Grid::zeros(counts.rows(), self.bin_count());
        for t in 0..counts.rows() {
            let row = counts.row(t);
            let out = sums.row_mut(t);
            for (c, &b) in self.column_bins.iter().enumerate() {
                out[b] += row[c];
            }
        }
        sums
    }
}

/// Objective and marginals of a partitioning program.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionTarget {
    pub row_sums: Vec<f64>,
    pub col_sums: Vec<f64>,
    pub columns: Vec<Vec<usize>>,
    pub groups: Vec<MarginalGroup>,
}

impl PartitionTarget {
    pub fn new(groups: Vec<MarginalGroup>, row_sums: Vec<f64>, col_sums: Vec<f64>, columns: Vec<Vec<usize>>) -> Result<Self> {
        let t = row_sums.len();
        let g = col_sums.len();
        if columns.len() != g {
            return Err(Error::Parameter(format!("{} column keys for {g} columns", columns.len())));
        }
        for group in &groups {
            if group.targets.rows() != t || group.column_bins.len() != g {
                return Err(Error::Parameter("marginal group shape does not match the program".into()));
            }
            if group.column_bins.iter().any(|&b| b >= group.bin_count()) {
                return Err(Error::Parameter("column mapped to a missing bin".into()));
            }
        }
        if let Some(v) = row_sums.iter().chain(&col_sums).find(|&&v| !(v >= 0.0)) {
            return Err(Error::Parameter(format!("marginals must be nonnegative, got {v}")));
        }
        let rows_total: f64 = row_sums.iter().sum();
        let cols_total: f64 = col_sums.iter().sum();
        if (rows_total - cols_total).abs() > 1e-9 * cols_total.max(1.0) {
            return Err(Error::Infeasible(format!(
                "row marginals sum to {rows_total} but column marginals sum to {cols_total}"
            )));
        }
        Ok(Self {
            row_sums,
            col_sums,
            columns,
            groups,
        })
    }

    /// Cell-wise target `min sum (a_tk - desired_tk)^2`.
    pub fn cellwise(desired: Grid, row_sums: Vec<f64>, col_sums: Vec<f64>) -> Result<Self> {
        let g = desired.cols();
        let group = MarginalGroup {
            column_bins: (0..g).collect(),
            targets: desired,
        };
        Self::new(vec![group], row_sums, col_sums, (0..g).map(|k| vec![k]).collect())
    }

    /// Class/size target from explicit draws: `sizes` sums to 1, each `class_mix[t]` sums to 1.
    pub fn from_class_draws(sizes: &[f64], class_mix: &[Vec<f64>], class_totals: &[u64]) -> Result<Self> {
        let n = class_totals.iter().sum::<u64>() as f64;
        if n <= 0.0 {
            return Err(Error::Parameter("dataset has no samples".into()));
        }
        let mut desired = Grid::zeros(sizes.len(), class_totals.len());
        for (t, (&size, mix)) in sizes.iter().zip(class_mix).enumerate() {
            for (k, &c) in mix.iter().enumerate() {
                desired[(t, k)] = c * size * n;
            }
        }
        let row_sums = sizes.iter().map(|s| s * n).collect();
        let col_sums = class_totals.iter().map(|&c| c as f64).collect();
        Self::cellwise(desired, row_sums, col_sums)
    }

    /// Feature/class/size target from explicit draws. `feature_mix[t][j]` is
    /// client `t`'s category distribution for feature `j`.
    pub fn from_feature_draws(
        sizes: &[f64],
        class_mix: &[Vec<f64>],
        feature_mix: &[Vec<Vec<f64>>],
        config_totals: &BTreeMap<Vec<usize>, u64>,
        classes: usize,
        feature_arities: &[usize],
    ) -> Result<Self> {
        let m = feature_arities.len();
        let mut columns = Vec::new();
        let mut col_sums = Vec::new();
        for (key, &b) in config_totals {
            if key.len() != m + 1 {
                return Err(Error::Parameter(format!("configuration {key:?} should have {} elements", m + 1)));
            }
            if key[0] >= classes || key[1..].iter().zip(feature_arities).any(|(&c, &d)| c >= d) {
                return Err(Error::Parameter(format!("configuration {key:?} is out of range")));
            }
            if b == 0 {
                log::warn!("dropping empty configuration {key:?}");
                continue;
            }
            columns.push(key.clone());
            col_sums.push(b as f64);
        }
        let n: f64 = col_sums.iter().sum();
        if n <= 0.0 {
            return Err(Error::Parameter("dataset has no samples".into()));
        }
        let t_count = sizes.len();
        let mut class_targets = Grid::zeros(t_count, classes);
        for t in 0..t_count {
            for k in 0..classes {
                class_targets[(t, k)] = class_mix[t][k] * sizes[t] * n;
            }
        }
        let mut groups = vec![MarginalGroup {
            column_bins: columns.iter().map(|u| u[0]).collect(),
            targets: class_targets,
        }];
        for (j, &d) in feature_arities.iter().enumerate() {
            let mut targets = Grid::zeros(t_count, d);
            for t in 0..t_count {
                for i in 0..d {
                    targets[(t, i)] = feature_mix[t][j][i] * sizes[t] * n;
                }
            }
            groups.push(MarginalGroup {
                column_bins: columns.iter().map(|u| u[j + 1]).collect(),
                targets,
            });
        }
        let row_sums = sizes.iter().map(|s| s * n).collect();
        Self::new(groups, row_sums, col_sums, columns)
    }

    pub fn clients(&self) -> usize {
        self.row_sums.len()
    }

    pub fn n_columns(&self) -> usize {
        self.col_sums.len()
    }

    pub fn total(&self) -> f64 {
        self.col_sums.iter().sum()
    }

    /// The cell-wise target matrix, when the program is cell-wise.
    pub fn desired(&self) -> Option<&Grid> {
        match self.groups.as_slice() {
            [g] if g.column_bins.iter().enumerate().all(|(c, &b)| c == b) && g.bin_count() == self.n_columns() => {
                Some(&g.targets)
            }
            _ => None,
        }
    }

    pub fn loss(&self, counts: &Grid) -> f64 {
        self.groups
            .iter()
            .map(|g| {
                let sums = g.bin_sums(counts);
                sums.data().iter().zip(g.targets.data()).map(|(s, t)| (s - t) * (s - t)).sum::<f64>()
            })
            .sum()
    }

    /// Gradient of [`Self::loss`] written into `out`.
    pub fn gradient(&self, counts: &Grid, out: &mut Grid) {
        out.data_mut().fill(0.0);
        for g in &self.groups {
            let sums = g.bin_sums(counts);
            for t in 0..counts.rows() {
                let res = sums.row(t);
                let tgt = g.targets.row(t);
                let o = out.row_mut(t);
                for (c, &b) in g.column_bins.iter().enumerate() {
                    o[c] += 2.0 * (res[b] - tgt[b]);
                }
            }
        }
    }

    /// Upper bound on the gradient's Lipschitz constant: the per-client
    /// Hessian is `2 * sum_g A_g^T A_g` with block all-ones `A_g^T A_g`.
    pub fn lipschitz(&self) -> f64 {
        2.0 * self.groups.iter().map(|g| g.largest_bin() as f64).sum::<f64>().max(1.0)
    }
}

fn draw_sizes_and_classes(priors: &DirichletPriors, streams: &Streams) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let sizes = sample_dirichlet(priors.mu, priors.clients, &mut streams.stream(Purpose::ClientSizes, &[]))?;
    let class_mix = (0..priors.clients)
        .map(|t| sample_dirichlet(priors.lambda, priors.classes, &mut streams.stream(Purpose::ClassMix, &[t as u64])))
        .collect::<Result<Vec<_>>>()?;
    Ok((sizes, class_mix))
}

/// Draw client sizes `n ~ Dir(mu)` and class mixes `c_t ~ Dir(lambda)`, and
/// target `c_tk * n_t * N` under the dataset's class totals.
pub fn build_target_class_size(priors: &DirichletPriors, class_totals: &[u64], streams: &Streams) -> Result<PartitionTarget> {
    priors.validate()?;
    if class_totals.len() != priors.classes {
        return Err(Error::Parameter(format!(
            "{} class totals for {} classes",
            class_totals.len(),
            priors.classes
        )));
    }
    let (sizes, class_mix) = draw_sizes_and_classes(priors, streams)?;
    PartitionTarget::from_class_draws(&sizes, &class_mix, class_totals)
}

/// As [`build_target_class_size`], plus per-client category mixes
/// `f_t^j ~ Dir(theta)`; columns index the observed configurations.
pub fn build_target_full(
    priors: &DirichletPriors,
    config_totals: &BTreeMap<Vec<usize>, u64>,
    streams: &Streams,
) -> Result<PartitionTarget> {
    priors.validate()?;
    let theta = priors.theta.unwrap_or(1.0);
    let (sizes, class_mix) = draw_sizes_and_classes(priors, streams)?;
    let feature_mix = (0..priors.clients)
        .map(|t| {
            priors
                .feature_arities
                .iter()
                .enumerate()
                .map(|(j, &d)| sample_dirichlet(theta, d, &mut streams.stream(Purpose::FeatureMix, &[t as u64, j as u64])))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    PartitionTarget::from_feature_draws(&sizes, &class_mix, &feature_mix, config_totals, priors.classes, &priors.feature_arities)
}
