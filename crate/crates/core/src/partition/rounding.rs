//! Controlled rounding of a fractional transportation matrix.
//!
//! The matrix is bordered by its negated row and column sums and the grand
//! total, so that every row and column of the bordered table sums to zero.
//! Fractional cells then form a bipartite graph in which every vertex has
//! degree zero or at least two, hence contains a cycle whenever any cell is
//! fractional. Shifting mass alternately around such a cycle keeps all sums
//! fixed and makes at least one cell integral. Cells only ever move toward
//! their own floor or ceiling, so each final entry is within one of the input
//! and cells that start integral (including zeros) never change.

use super::{Grid, IntegerPartition, PartitionMatrix};
use crate::error::{Error, Result};

fn frac_distance(v: f64) -> f64 {
    (v - v.round()).abs()
}

pub fn round_partition(a: &PartitionMatrix) -> Result<IntegerPartition> {
    let (t, g) = (a.counts.rows(), a.counts.cols());
    if a.counts.data().iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::Parameter("cannot round a matrix with negative or non-finite entries".into()));
    }
    let (n_rows, n_cols) = (t + 1, g + 1);
    let mut x = Grid::zeros(n_rows, n_cols);
    let mut total = 0.0;
    for r in 0..t {
        let mut row_total = 0.0;
        for c in 0..g {
            x[(r, c)] = a.counts[(r, c)];
            row_total += a.counts[(r, c)];
        }
        x[(r, g)] = -row_total;
        total += row_total;
    }
    for c in 0..g {
        x[(t, c)] = -a.counts.col_sum(c);
    }
    x[(t, g)] = total;

    let tol = 64.0 * f64::EPSILON * total.max(1.0);
    let noise = 1e-6 * total.max(1.0);
    let snap = |v: &mut f64| {
        if frac_distance(*v) <= tol {
            *v = v.round();
        }
    };
    x.data_mut().iter_mut().for_each(snap);

    let n_nodes = n_rows + n_cols;
    let mut adjacency: Vec<Vec<usize>> = vec![Vec::new(); n_nodes];
    let mut position: Vec<Option<usize>> = vec![None; n_nodes];
    let endpoints = |cell: usize| (cell / n_cols, n_rows + cell % n_cols);
    loop {
        adjacency.iter_mut().for_each(Vec::clear);
        let mut first = None;
        for (cell, &v) in x.data().iter().enumerate() {
            if frac_distance(v) > tol {
                let (r, c) = endpoints(cell);
                adjacency[r].push(cell);
                adjacency[c].push(cell);
                first.get_or_insert(r);
            }
        }
        let Some(start) = first else { break };

        // walk without immediately reusing an edge until a vertex repeats
        position.iter_mut().for_each(|p| *p = None);
        let mut path: Vec<usize> = Vec::new();
        let mut edges: Vec<usize> = Vec::new();
        let mut node = start;
        let mut came_by: Option<usize> = None;
        let cycle_start = loop {
            position[node] = Some(path.len());
            path.push(node);
            let Some(&edge) = adjacency[node].iter().find(|&&e| Some(e) != came_by) else {
                break None;
            };
            let (r, c) = endpoints(edge);
            let next = if node == r { c } else { r };
            edges.push(edge);
            if let Some(p) = position[next] {
                break Some(p);
            }
            came_by = Some(edge);
            node = next;
        };

        let Some(p) = cycle_start else {
            // a dangling fractional cell can only be accumulated float noise
            let edge = came_by.expect("a lone fractional cell has a neighbour");
            let v = &mut x.data_mut()[edge];
            if frac_distance(*v) > noise {
                return Err(Error::Consistency(format!("marginals of the matrix are not integral near {v}")));
            }
            *v = v.round();
            continue;
        };

        let signs: Vec<f64> = path[p..].iter().map(|&from| if from < n_rows { 1.0 } else { -1.0 }).collect();
        let cycle = &edges[p..];
        let (mut up, mut down) = (f64::INFINITY, f64::INFINITY);
        for (&cell, &sign) in cycle.iter().zip(&signs) {
            let v = x.data()[cell];
            let to_ceil = v.ceil() - v;
            let to_floor = v - v.floor();
            if sign > 0.0 {
                up = up.min(to_ceil);
                down = down.min(to_floor);
            } else {
                up = up.min(to_floor);
                down = down.min(to_ceil);
            }
        }
        let (delta, direction) = if up <= down { (up, 1.0) } else { (down, -1.0) };
        for (&cell, &sign) in cycle.iter().zip(&signs) {
            let v = &mut x.data_mut()[cell];
            let moved = *v + direction * sign * delta;
            // land exactly on the integer the limiting cell was heading for
            *v = if frac_distance(moved) <= tol.max(8.0 * f64::EPSILON * moved.abs()) {
                moved.round()
            } else {
                moved
            };
        }
    }

    let counts: Vec<Vec<u64>> = (0..t).map(|r| (0..g).map(|c| x[(r, c)].round().max(0.0) as u64).collect()).collect();
    let row_sums: Vec<u64> = (0..t).map(|r| (-x[(r, g)]).round().max(0.0) as u64).collect();
    let col_sums: Vec<u64> = (0..g).map(|c| (-x[(t, c)]).round().max(0.0) as u64).collect();
    for r in 0..t {
        if counts[r].iter().sum::<u64>() != row_sums[r] {
            return Err(Error::Consistency(format!("rounding failed to balance row {r}")));
        }
    }
    for c in 0..g {
        if counts.iter().map(|row| row[c]).sum::<u64>() != col_sums[c] {
            return Err(Error::Consistency(format!("rounding failed to balance column {c}")));
        }
    }
    Ok(IntegerPartition {
        counts,
        row_sums,
        col_sums,
        columns: a.columns.clone(),
    })
}
