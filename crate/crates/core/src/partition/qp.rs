//! Projected-gradient solver for the partitioning QPs.
//!
//! The feasible set `{a >= 0, a 1 = r, a^T 1 = c}` is the intersection of two
//! sets with cheap exact projections: nonnegative matrices with fixed row
//! sums (one scaled-simplex projection per row) and nonnegative matrices with
//! fixed column sums (one per column). Dykstra's alternating scheme between
//! the two converges to the Euclidean projection onto their intersection.

use super::{Grid, PartitionMatrix, PartitionTarget};
use crate::error::{Error, Result};

const DYKSTRA_MAX_ITERS: usize = 200_000;
const PGD_MAX_ITERS: usize = 20_000;

/// Euclidean projection of `v` onto `{x >= 0, sum x = z}`.
fn project_simplex(v: &[f64], z: f64, out: &mut [f64], scratch: &mut Vec<f64>) {
    if z <= 0.0 {
        out.fill(0.0);
        return;
    }
    scratch.clear();
    scratch.extend_from_slice(v);
    scratch.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut tau = 0.0;
    for (j, &u) in scratch.iter().enumerate() {
        cumulative += u;
        let candidate = (cumulative - z) / (j + 1) as f64;
        if u - candidate > 0.0 {
            tau = candidate;
        } else {
            break;
        }
    }
    for (o, &x) in out.iter_mut().zip(v) {
        *o = (x - tau).max(0.0);
    }
}

fn project_rows(src: &Grid, rows: &[f64], dst: &mut Grid, scratch: &mut Vec<f64>) {
    for (r, &z) in rows.iter().enumerate() {
        project_simplex(src.row(r), z, dst.row_mut(r), scratch);
    }
}

fn project_cols(src: &Grid, cols: &[f64], dst: &mut Grid, scratch: &mut Vec<f64>) {
    let n = src.rows();
    let mut column = vec![0.0; n];
    let mut projected = vec![0.0; n];
    for (c, &z) in cols.iter().enumerate() {
        for r in 0..n {
            column[r] = src[(r, c)];
        }
        project_simplex(&column, z, &mut projected, scratch);
        for r in 0..n {
            dst[(r, c)] = projected[r];
        }
    }
}

fn max_row_residual(x: &Grid, rows: &[f64]) -> f64 {
    rows.iter()
        .enumerate()
        .map(|(r, &z)| (x.row(r).iter().sum::<f64>() - z).abs())
        .fold(0.0, f64::max)
}

/// Euclidean projection of `y` onto the transportation polytope with
/// marginals `rows`, `cols`. The result meets the column sums exactly (up to
/// rounding) and the row sums within `1e-11 * N`.
pub fn project_transportation(y: &Grid, rows: &[f64], cols: &[f64]) -> Grid {
    let total: f64 = cols.iter().sum();
    let tol = 1e-11 * total.max(1.0);
    let mut scratch = Vec::new();
    let mut x = y.clone();
    let mut p = Grid::zeros(y.rows(), y.cols());
    let mut q = Grid::zeros(y.rows(), y.cols());
    let mut shifted = Grid::zeros(y.rows(), y.cols());
    let mut a = Grid::zeros(y.rows(), y.cols());
    let mut next = Grid::zeros(y.rows(), y.cols());
    for _ in 0..DYKSTRA_MAX_ITERS {
        for ((s, xv), pv) in shifted.data_mut().iter_mut().zip(x.data()).zip(p.data()) {
            *s = xv + pv;
        }
        project_rows(&shifted, rows, &mut a, &mut scratch);
        for ((pv, s), av) in p.data_mut().iter_mut().zip(shifted.data()).zip(a.data()) {
            *pv = s - av;
        }
        for ((s, av), qv) in shifted.data_mut().iter_mut().zip(a.data()).zip(q.data()) {
            *s = av + qv;
        }
        project_cols(&shifted, cols, &mut next, &mut scratch);
        for ((qv, s), nv) in q.data_mut().iter_mut().zip(shifted.data()).zip(next.data()) {
            *qv = s - nv;
        }
        let moved = next.max_abs_diff(&x);
        std::mem::swap(&mut x, &mut next);
        if moved <= tol && max_row_residual(&x, rows) <= tol {
            break;
        }
    }
    x
}

/// Minimize the target's quadratic objective over the transportation polytope.
///
/// For a cell-wise target the objective is the squared distance to the target
/// matrix, so the minimizer is a single projection. Otherwise accelerated
/// projected gradient with step `1/L` and adaptive restart is used.
pub fn solve_qp(target: &PartitionTarget) -> Result<PartitionMatrix> {
    let rows = &target.row_sums;
    let cols = &target.col_sums;
    let total: f64 = cols.iter().sum();
    let rows_total: f64 = rows.iter().sum();
    if (rows_total - total).abs() > 1e-9 * total.max(1.0) {
        return Err(Error::Infeasible(format!(
            "row marginals sum to {rows_total} but column marginals sum to {total}"
        )));
    }
    if rows.iter().chain(cols).any(|&v| !(v >= 0.0)) {
        return Err(Error::Infeasible("negative marginal".into()));
    }

    let counts = match target.desired() {
        Some(desired) => project_transportation(desired, rows, cols),
        None => accelerated_descent(target),
    };
    let matrix = PartitionMatrix {
        counts,
        row_sums: rows.clone(),
        col_sums: cols.clone(),
        columns: target.columns.clone(),
    };
    matrix.check_feasible(1e-6)?;
    Ok(matrix)
}

fn accelerated_descent(target: &PartitionTarget) -> Grid {
    let rows = &target.row_sums;
    let cols = &target.col_sums;
    let total: f64 = cols.iter().sum();
    let (t_count, g_count) = (rows.len(), cols.len());
    let step = 1.0 / target.lipschitz();

    // the independence coupling r c^T / N is always feasible
    let mut x = Grid::zeros(t_count, g_count);
    if total > 0.0 {
        for r in 0..t_count {
            for c in 0..g_count {
                x[(r, c)] = rows[r] * cols[c] / total;
            }
        }
    }
    let mut f_x = target.loss(&x);
    let mut y = x.clone();
    let mut momentum = 1.0f64;
    let mut grad = Grid::zeros(t_count, g_count);
    let mut z = Grid::zeros(t_count, g_count);
    let tol = 1e-10 * total.max(1.0);
    for _ in 0..PGD_MAX_ITERS {
        target.gradient(&y, &mut grad);
        for ((zv, yv), gv) in z.data_mut().iter_mut().zip(y.data()).zip(grad.data()) {
            *zv = yv - step * gv;
        }
        let x_next = project_transportation(&z, rows, cols);
        let f_next = target.loss(&x_next);
        if f_next > f_x {
            // restart momentum from the last iterate
            if momentum == 1.0 {
                break;
            }
            momentum = 1.0;
            y = x.clone();
            continue;
        }
        let moved = x_next.max_abs_diff(&x);
        let next_momentum = (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt()) / 2.0;
        let beta = (momentum - 1.0) / next_momentum;
        for ((yv, xn), xo) in y.data_mut().iter_mut().zip(x_next.data()).zip(x.data()) {
            *yv = xn + beta * (xn - xo);
        }
        momentum = next_momentum;
        let improvement = f_x - f_next;
        x = x_next;
        f_x = f_next;
        if moved <= tol || improvement <= 1e-15 * f_x.max(1.0) && moved <= 1e-7 * total.max(1.0) {
            break;
        }
    }
    x
}
