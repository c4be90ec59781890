//! Minimum-cost one-to-one assignment on rectangular cost matrices
//! (shortest augmenting path with potentials, O(n^2 m)).

/// Assign every row of `cost` (`rows x cols`, `rows <= cols`) to a distinct
/// column minimising the total cost. Returns the column chosen for each
/// row.
///
/// Panics if `rows > cols` or the rows are ragged; callers transpose.
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    assert!(n <= m, "more rows ({n}) than columns ({m})");
    assert!(cost.iter().all(|r| r.len() == m), "ragged cost matrix");

    // 1-based arrays; index 0 is the virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];

    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let reduced = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if reduced < minv[j] {
                    minv[j] = reduced;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut result = vec![0; n];
    for j in 1..=m {
        if owner[j] != 0 {
            result[owner[j] - 1] = j - 1;
        }
    }
    result
}

/// Like [`min_cost_assignment`] but accepts either orientation; returns
/// `(row, col)` pairs covering the smaller dimension.
pub fn min_cost_pairs(cost: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    if rows <= cols {
        min_cost_assignment(cost)
            .into_iter()
            .enumerate()
            .collect()
    } else {
        let transposed: Vec<Vec<f64>> = (0..cols)
            .map(|c| (0..rows).map(|r| cost[r][c]).collect())
            .collect();
        let mut pairs: Vec<(usize, usize)> = min_cost_assignment(&transposed)
            .into_iter()
            .enumerate()
            .map(|(c, r)| (r, c))
            .collect();
        pairs.sort_unstable();
        pairs
    }
}
