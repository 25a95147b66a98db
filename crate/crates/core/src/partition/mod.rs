//! Non-IID client partitioning.
//!
//! Client sizes, class mixes and (optionally) categorical feature mixes are
//! drawn from Dirichlet priors. The resulting ideal counts generally violate
//! the dataset's marginals, so a quadratic program over the transportation
//! polytope finds the closest feasible count matrix; a random walk on the
//! polytope then picks a random near-optimal point, which is rounded to
//! integers and materialized into per-client datasets.

mod assign;
mod dirichlet;
mod grid;
mod qp;
mod rounding;
mod target;
mod walk;

use serde::{Deserialize, Serialize};

pub use assign::{assign_samples, c_score};
pub use dirichlet::sample_dirichlet;
pub use grid::Grid;
pub use qp::{project_transportation, solve_qp};
pub use rounding::round_partition;
pub use target::{build_target_class_size, build_target_full, MarginalGroup, PartitionTarget};
pub use walk::{random_qp_solution, randomize_step, LossTracker, RectangleMove, WalkOutcome, WalkParams};

use crate::data::{ClientDataset, Dataset};
use crate::error::{Error, Result};
use crate::rng::{Purpose, SimRng, Streams};

/// Concentrations of the Dirichlet priors plus the problem dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirichletPriors {
    /// Client-size concentration.
    pub mu: f64,
    /// Class-mix concentration, shared by all clients.
    pub lambda: f64,
    /// Feature-mix concentration, required when `feature_arities` is non-empty.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
    pub clients: usize,
    pub classes: usize,
    #[serde(default)]
    pub feature_arities: Vec<usize>,
}

impl DirichletPriors {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Parameter(format!("{name} must be positive, got {v}")))
            }
        };
        positive("mu", self.mu)?;
        positive("lambda", self.lambda)?;
        if let Some(theta) = self.theta {
            positive("theta", theta)?;
        }
        if self.clients < 2 {
            return Err(Error::Parameter(format!("need at least 2 clients, got {}", self.clients)));
        }
        if self.classes < 2 {
            return Err(Error::Parameter(format!("need at least 2 classes, got {}", self.classes)));
        }
        if let Some(d) = self.feature_arities.iter().find(|&&d| d < 2) {
            return Err(Error::Parameter(format!("categorical features need at least 2 categories, got {d}")));
        }
        if !self.feature_arities.is_empty() && self.theta.is_none() {
            return Err(Error::Parameter("theta is required when sampling feature mixes".into()));
        }
        Ok(())
    }
}

/// A feasible point of the transportation polytope (real-valued counts).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionMatrix {
    pub counts: Grid,
    pub row_sums: Vec<f64>,
    pub col_sums: Vec<f64>,
    /// Configuration tuple of each column (`[class]` when partitioning by class only).
    pub columns: Vec<Vec<usize>>,
}

impl PartitionMatrix {
    pub fn total(&self) -> f64 {
        self.col_sums.iter().sum()
    }

    /// Largest marginal residual and most negative entry.
    pub fn residuals(&self) -> (f64, f64) {
        let mut worst: f64 = 0.0;
        for (r, target) in self.row_sums.iter().enumerate() {
            worst = worst.max((self.counts.row(r).iter().sum::<f64>() - target).abs());
        }
        for (c, target) in self.col_sums.iter().enumerate() {
            worst = worst.max((self.counts.col_sum(c) - target).abs());
        }
        let min_entry = self.counts.data().iter().copied().fold(f64::INFINITY, f64::min);
        (worst, min_entry)
    }

    /// Checks the feasibility invariants at tolerance `rel_tol * N`.
    pub fn check_feasible(&self, rel_tol: f64) -> Result<()> {
        let (worst, min_entry) = self.residuals();
        let scale = self.total().max(1.0);
        if min_entry < 0.0 {
            return Err(Error::Infeasible(format!("negative entry {min_entry}")));
        }
        if worst > rel_tol * scale {
            return Err(Error::Infeasible(format!("marginal residual {worst} exceeds {}", rel_tol * scale)));
        }
        Ok(())
    }
}

/// Integer sample counts with exact marginals.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntegerPartition {
    pub counts: Vec<Vec<u64>>,
    pub row_sums: Vec<u64>,
    pub col_sums: Vec<u64>,
    pub columns: Vec<Vec<usize>>,
}

impl IntegerPartition {
    pub fn total(&self) -> u64 {
        self.col_sums.iter().sum()
    }
}

/// Everything produced by [`partition_dataset`].
#[derive(Debug, Clone)]
pub struct PartitionOutcome {
    pub target: PartitionTarget,
    pub qp_solution: PartitionMatrix,
    pub walk: WalkOutcome,
    pub integer: IntegerPartition,
    pub clients: Vec<ClientDataset>,
    pub c_score: f64,
}

/// Full pipeline: target construction, QP, random walk, rounding, assignment.
///
/// `features` selects categorical columns of `ds` whose mixes are sampled as
/// well; when empty the class/size program is used.
pub fn partition_dataset(
    ds: &Dataset,
    priors: &DirichletPriors,
    features: &[usize],
    walk: &WalkParams,
    seed: u64,
) -> Result<PartitionOutcome> {
    priors.validate()?;
    if ds.is_empty() {
        return Err(Error::Parameter("dataset is empty".into()));
    }
    if priors.classes != ds.n_classes() {
        return Err(Error::Consistency(format!(
            "priors declare {} classes, dataset has {}",
            priors.classes,
            ds.n_classes()
        )));
    }
    let streams = Streams::new(seed);
    let target = if features.is_empty() {
        let totals: Vec<u64> = ds.class_counts().iter().map(|&c| c as u64).collect();
        build_target_class_size(priors, &totals, &streams)?
    } else {
        build_target_full(priors, &ds.config_totals(features), &streams)?
    };
    let qp_solution = solve_qp(&target)?;
    let mut rng: SimRng = streams.stream(Purpose::RandomWalk, &[]);
    let walk = random_qp_solution(&qp_solution, &target, walk, &mut rng)?;
    let integer = round_partition(&walk.best)?;
    let mut assign_rng = streams.stream(Purpose::Assignment, &[]);
    let clients = assign_samples(ds, &integer, features, &mut assign_rng)?;
    let c_score = c_score(&clients)?;
    Ok(PartitionOutcome {
        target,
        qp_solution,
        walk,
        integer,
        clients,
        c_score,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_gaussian_mixture;

    fn priors(clients: usize, classes: usize) -> DirichletPriors {
        DirichletPriors {
            mu: 1.0,
            lambda: 0.5,
            theta: None,
            clients,
            classes,
            feature_arities: vec![],
        }
    }

    #[test]
    fn priors_validation() {
        assert!(priors(2, 2).validate().is_ok());
        assert!(priors(1, 2).validate().is_err());
        assert!(DirichletPriors { mu: 0.0, ..priors(3, 2) }.validate().is_err());
        assert!(DirichletPriors { feature_arities: vec![2], ..priors(3, 2) }.validate().is_err());
        assert!(DirichletPriors {
            feature_arities: vec![1],
            theta: Some(0.1),
            ..priors(3, 2)
        }
        .validate()
        .is_err());
    }

    #[test]
    fn pipeline_conserves_samples() {
        let ds = synth_gaussian_mixture(3, 2, 1.0, 600, 4).unwrap();
        let walk = WalkParams {
            burn_in: 2_000,
            steps: 5_000,
            xi: 0.002,
        };
        let out = partition_dataset(&ds, &priors(5, 3), &[], &walk, 11).unwrap();
        assert_eq!(out.integer.total(), 600);
        assert_eq!(out.clients.iter().map(ClientDataset::len).sum::<usize>(), 600);
        let mut all: Vec<usize> = out.clients.iter().flat_map(|c| c.sample_indices.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..600).collect::<Vec<_>>());
        let again = partition_dataset(&ds, &priors(5, 3), &[], &walk, 11).unwrap();
        assert_eq!(out.integer, again.integer);
    }
}
