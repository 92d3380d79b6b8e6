//! Hungarian bipartite matching baseline plus a brute-force oracle.
//!
//! This is the classical one-to-one assignment step the match-free pipeline
//! replaces. The solver is the O(n³) shortest-augmenting-path formulation
//! with dual potentials, run on the cost matrix padded to square — the
//! textbook complexity profile, which is exactly what the latency benchmark
//! is meant to compare against. Rectangular inputs (M ≠ N) are supported via
//! the zero-padding; ties are broken deterministically by lowest index.

use crate::error::{Error, Result};
use crate::numkernel::Matrix;

/// One-to-one assignment. Pairs are sorted by ground-truth index; each row
/// and each column appears at most once and `pairs.len() == min(M, N)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

fn total_from_pairs(c: &Matrix, pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(i, j)| c.get(i, j)).sum()
}

/// Minimum-total-cost assignment of all `min(M, N)` rows/columns.
pub fn hungarian_match(c: &Matrix) -> Result<Assignment> {
    if !c.is_finite() {
        return Err(Error::validation("cost matrix contains non-finite entries"));
    }
    let (m, n) = c.shape();
    if m == 0 || n == 0 {
        return Ok(Assignment { pairs: vec![], total_cost: 0.0 });
    }
    let dim = m.max(n);

    // Padded square view; dummy cells cost 0.
    let cost = |i: usize, j: usize| -> f64 {
        if i < m && j < n {
            c.get(i, j)
        } else {
            0.0
        }
    };

    // Shortest augmenting path with potentials. Column `dim` is the virtual
    // start column holding the row currently being inserted.
    let mut u = vec![0.0f64; dim];
    let mut v = vec![0.0f64; dim + 1];
    let mut row_of = vec![usize::MAX; dim + 1];
    let mut way = vec![0usize; dim + 1];

    for i in 0..dim {
        row_of[dim] = i;
        let mut j0 = dim;
        let mut minv = vec![f64::INFINITY; dim + 1];
        let mut used = vec![false; dim + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 0..dim {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=dim {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == usize::MAX {
                break;
            }
        }
        // unwind the augmenting path
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == dim {
                break;
            }
        }
    }

    let mut pairs: Vec<(usize, usize)> =
        (0..n).filter(|&j| row_of[j] < m).map(|j| (row_of[j], j)).collect();
    pairs.sort_unstable();
    debug_assert_eq!(pairs.len(), m.min(n));
    Ok(Assignment { total_cost: total_from_pairs(c, &pairs), pairs })
}

/// Exhaustive minimum over all injections of rows into columns. Capped at
/// `min(M, N) ≤ 9`; the test oracle for [`hungarian_match`].
pub fn brute_force_match(c: &Matrix) -> Result<Assignment> {
    if !c.is_finite() {
        return Err(Error::validation("cost matrix contains non-finite entries"));
    }
    let (m, n) = c.shape();
    if m.min(n) > 9 {
        return Err(Error::validation(format!(
            "brute force capped at min(M,N) <= 9, got {}",
            m.min(n)
        )));
    }
    if m == 0 || n == 0 {
        return Ok(Assignment { pairs: vec![], total_cost: 0.0 });
    }

    // Iterate over the smaller side to keep the branching factor sane.
    let transposed = m > n;
    let ct = if transposed { c.transpose() } else { c.clone() };
    let (rows, cols) = ct.shape();

    let mut used = vec![false; cols];
    let mut current = Vec::with_capacity(rows);
    let mut best: Option<(f64, Vec<usize>)> = None;
    fn rec(
        ct: &Matrix,
        row: usize,
        used: &mut Vec<bool>,
        current: &mut Vec<usize>,
        acc: f64,
        best: &mut Option<(f64, Vec<usize>)>,
    ) {
        let (rows, cols) = ct.shape();
        if row == rows {
            let better = match best {
                None => true,
                Some((b, _)) => acc < *b,
            };
            if better {
                *best = Some((acc, current.clone()));
            }
            return;
        }
        for j in 0..cols {
            if !used[j] {
                used[j] = true;
                current.push(j);
                rec(ct, row + 1, used, current, acc + ct.get(row, j), best);
                current.pop();
                used[j] = false;
            }
        }
    }
    rec(&ct, 0, &mut used, &mut current, 0.0, &mut best);

    let (_, cols_for_rows) = best.unwrap();
    let mut pairs: Vec<(usize, usize)> = cols_for_rows
        .iter()
        .enumerate()
        .map(|(r, &cc)| if transposed { (cc, r) } else { (r, cc) })
        .collect();
    pairs.sort_unstable();
    Ok(Assignment { total_cost: total_from_pairs(c, &pairs), pairs })
}
