//! Minimum-cost one-to-one assignment on rectangular cost matrices.

use crate::error::{Error, Result};

/// Optimal assignment cost for `rows x cols` with `rows <= cols`, every row matched.
/// Returns the column of each row.
fn solve_wide(cost: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> (f64, Vec<usize>) {
    let n = rows.len();
    let m = cols.len();
    debug_assert!(n <= m);
    if n == 0 {
        return (0.0, Vec::new());
    }
    let c = |i: usize, j: usize| cost[rows[i - 1]][cols[j - 1]];
    // Shortest augmenting paths with potentials; indices are 1-based, 0 is a sentinel.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = c(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of = vec![0usize; n];
    for j in 1..=m {
        if p[j] != 0 {
            col_of[p[j] - 1] = j - 1;
        }
    }
    let total = col_of.iter().enumerate().map(|(i, &j)| cost[rows[i]][cols[j]]).sum();
    (total, col_of)
}

/// Optimal cost of a maximum-cardinality matching between `rows` and `cols`.
fn best_cost(cost: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> f64 {
    if rows.len() <= cols.len() {
        solve_wide(cost, rows, cols).0
    } else {
        let t: Vec<Vec<f64>> = (0..cost[0].len())
            .map(|j| (0..cost.len()).map(|i| cost[i][j]).collect())
            .collect();
        solve_wide(&t, cols, rows).0
    }
}

/// Minimum-cost matching of size `min(M, N)`. Among optimal matchings the one
/// whose sorted pair list is lexicographically smallest is returned.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Vec<(usize, usize)>> {
    let m = cost.len();
    if m == 0 {
        return Ok(Vec::new());
    }
    let n = cost[0].len();
    if cost.iter().any(|r| r.len() != n) {
        return Err(Error::Shape("ragged cost matrix".into()));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::InvalidArgument("cost matrix has non-finite entries".into()));
    }
    let all_rows: Vec<usize> = (0..m).collect();
    let all_cols: Vec<usize> = (0..n).collect();
    let optimum = best_cost(cost, &all_rows, &all_cols);
    let scale: f64 = cost.iter().flatten().map(|c| c.abs()).fold(1.0, f64::max);
    let tol = 1e-9 * scale * (m.max(n) as f64);
    let target = m.min(n);

    let mut pairs = Vec::with_capacity(target);
    let mut free_cols: Vec<usize> = all_cols;
    let mut fixed = 0.0;
    for r in 0..m {
        let rest_rows: Vec<usize> = (r + 1..m).collect();
        let mut chosen = None;
        for (k, &c) in free_cols.iter().enumerate() {
            let rest_cols: Vec<usize> = free_cols.iter().copied().filter(|&x| x != c).collect();
            if pairs.len() + 1 + rest_rows.len().min(rest_cols.len()) < target {
                continue;
            }
            let total = fixed + cost[r][c] + best_cost(cost, &rest_rows, &rest_cols);
            if total <= optimum + tol {
                chosen = Some(k);
                break;
            }
        }
        match chosen {
            Some(k) => {
                let c = free_cols.remove(k);
                fixed += cost[r][c];
                pairs.push((r, c));
            }
            None => {
                // Leaving this row unmatched must be the optimal continuation.
                debug_assert!(pairs.len() + rest_rows.len().min(free_cols.len()) >= target);
            }
        }
        if pairs.len() == target {
            break;
        }
    }
    Ok(pairs)
}

/// Matches on a probability matrix: minimum cost on `-P`, keeping only pairs
/// with probability strictly above `beta`.
pub fn assign_above(probs: &[Vec<f64>], beta: f64) -> Result<Vec<(usize, usize)>> {
    let cost: Vec<Vec<f64>> = probs.iter().map(|r| r.iter().map(|p| -p).collect()).collect();
    Ok(hungarian(&cost)?
        .into_iter()
        .filter(|&(r, c)| probs[r][c] > beta)
        .collect())
}
