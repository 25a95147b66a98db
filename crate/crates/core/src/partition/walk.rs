//! Random search over the transportation polytope.
//!
//! A step picks two cells in distinct rows and columns, `(i, j)` and
//! `(i', j')`, draws `eps ~ U(0, min(a_ij, a_i'j', xi))`, subtracts it from
//! those two cells and adds it to the opposite corners `(i, j')`, `(i', j)`.
//! Marginals are untouched and entries stay nonnegative.
//!
//! Entries are kept on a dyadic grid fine enough to be invisible at the
//! problem's scale (`2^-50` of the total mass); with `eps` quantized to the
//! same grid every update and every partial sum is exact in `f64`, so
//! marginals are preserved bit-for-bit over arbitrarily long walks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Grid, PartitionMatrix, PartitionTarget};
use crate::error::{Error, Result};

const FULL_RECOMPUTE_EVERY: u64 = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WalkParams {
    /// Burn-in steps (`P`).
    pub burn_in: u64,
    /// Recorded steps (`Q`).
    pub steps: u64,
    /// Upper bound on a single step's mass shift.
    pub xi: f64,
}

impl Default for WalkParams {
    fn default() -> Self {
        Self {
            burn_in: 100_000,
            steps: 500_000,
            xi: 0.002,
        }
    }
}

/// A four-cell mass shift.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RectangleMove {
    pub row: usize,
    pub other_row: usize,
    pub col: usize,
    pub other_col: usize,
    pub eps: f64,
}

/// Grid spacing for a matrix of total mass `total`.
pub fn grid_quantum(total: f64) -> f64 {
    let exp = total.max(1.0).log2().ceil() as i32 - 50;
    2f64.powi(exp)
}

impl PartitionMatrix {
    /// Round every entry to the walk grid (a shift of at most `2^-51 N` per cell).
    pub fn snap_to_grid(&mut self) {
        let q = grid_quantum(self.total());
        for v in self.counts.data_mut() {
            *v = ((*v / q).round() * q).max(0.0);
        }
    }

    pub fn apply_move(&mut self, mv: &RectangleMove) {
        let c = &mut self.counts;
        c[(mv.row, mv.col)] -= mv.eps;
        c[(mv.other_row, mv.other_col)] -= mv.eps;
        c[(mv.row, mv.other_col)] += mv.eps;
        c[(mv.other_row, mv.col)] += mv.eps;
    }
}

fn distinct_pair<R: Rng + ?Sized>(n: usize, rng: &mut R) -> (usize, usize) {
    let a = rng.random_range(0..n);
    let mut b = rng.random_range(0..n - 1);
    if b >= a {
        b += 1;
    }
    (a, b)
}

/// One randomization step, in place. Draws are uniform over pairs of cells
/// with distinct rows and distinct columns. A step whose bound is zero is a no-op.
pub fn randomize_step<R: Rng + ?Sized>(a: &mut PartitionMatrix, xi: f64, rng: &mut R) -> Result<RectangleMove> {
    let (rows, cols) = (a.counts.rows(), a.counts.cols());
    if rows < 2 || cols < 2 {
        return Err(Error::Parameter(format!("random walk needs at least a 2x2 matrix, got {rows}x{cols}")));
    }
    if !(xi >= 0.0) {
        return Err(Error::Parameter(format!("step size must be nonnegative, got {xi}")));
    }
    let (row, other_row) = distinct_pair(rows, rng);
    let (col, other_col) = distinct_pair(cols, rng);
    let u: f64 = rng.random();
    let bound = a.counts[(row, col)].min(a.counts[(other_row, other_col)]).min(xi).max(0.0);
    let q = grid_quantum(a.total());
    let eps = ((u * bound) / q).floor() * q;
    let mv = RectangleMove {
        row,
        other_row,
        col,
        other_col,
        eps,
    };
    if eps > 0.0 {
        a.apply_move(&mv);
    }
    Ok(mv)
}

/// Incrementally maintained objective value for a walk.
#[derive(Debug, Clone)]
pub struct LossTracker {
    bin_sums: Vec<Grid>,
    loss: f64,
}

impl LossTracker {
    pub fn new(target: &PartitionTarget, counts: &Grid) -> Self {
        Self {
            bin_sums: target.groups.iter().map(|g| g.bin_sums(counts)).collect(),
            loss: target.loss(counts),
        }
    }

    pub fn loss(&self) -> f64 {
        self.loss
    }

    /// Update for a move already applied to the matrix; touches only the
    /// affected bins of the two rows.
    pub fn apply(&mut self, target: &PartitionTarget, mv: &RectangleMove) {
        if mv.eps == 0.0 {
            return;
        }
        for (group, sums) in target.groups.iter().zip(&mut self.bin_sums) {
            let b1 = group.column_bins[mv.col];
            let b2 = group.column_bins[mv.other_col];
            if b1 == b2 {
                continue;
            }
            for (t, b, delta) in [
                (mv.row, b1, -mv.eps),
                (mv.row, b2, mv.eps),
                (mv.other_row, b1, mv.eps),
                (mv.other_row, b2, -mv.eps),
            ] {
                let goal = group.targets[(t, b)];
                let old = sums[(t, b)] - goal;
                let new = old + delta;
                self.loss += new * new - old * old;
                sums[(t, b)] += delta;
            }
        }
    }
}

/// Result of [`random_qp_solution`].
#[derive(Debug, Clone)]
pub struct WalkOutcome {
    pub best: PartitionMatrix,
    pub best_loss: f64,
    pub post_burn_in_loss: f64,
}

/// Burn-in for `P` steps, then walk `Q` more steps keeping the lowest-loss
/// matrix seen. The post-burn-in matrix is the incumbent, so `Q = 0` returns it
/// and the returned loss never exceeds the post-burn-in loss.
pub fn random_qp_solution<R: Rng + ?Sized>(
    start: &PartitionMatrix,
    target: &PartitionTarget,
    params: &WalkParams,
    rng: &mut R,
) -> Result<WalkOutcome> {
    if start.counts.rows() != target.clients() || start.counts.cols() != target.n_columns() {
        return Err(Error::Parameter("starting matrix does not match the target's shape".into()));
    }
    let mut a = start.clone();
    a.snap_to_grid();
    for _ in 0..params.burn_in {
        randomize_step(&mut a, params.xi, rng)?;
    }
    let post_burn_in = a.clone();
    let post_burn_in_loss = target.loss(&a.counts);
    let mut tracker = LossTracker::new(target, &a.counts);
    let mut best = a.clone();
    let mut best_loss = post_burn_in_loss;
    for step in 1..=params.steps {
        let mv = randomize_step(&mut a, params.xi, rng)?;
        tracker.apply(target, &mv);
        if step % FULL_RECOMPUTE_EVERY == 0 {
            tracker = LossTracker::new(target, &a.counts);
        }
        if tracker.loss() < best_loss {
            best.counts.data_mut().copy_from_slice(a.counts.data());
            best_loss = tracker.loss();
        }
    }
    // the tracked value may have drifted; settle on exact losses
    let exact = target.loss(&best.counts);
    if exact > post_burn_in_loss {
        return Ok(WalkOutcome {
            best: post_burn_in,
            best_loss: post_burn_in_loss,
            post_burn_in_loss,
        });
    }
    Ok(WalkOutcome {
        best,
        best_loss: exact,
        post_burn_in_loss,
    })
}
