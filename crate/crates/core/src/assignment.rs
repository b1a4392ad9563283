//! Minimum-cost rectangular assignment (Hungarian algorithm).
//!
//! Jonker-Volgenant style shortest augmenting path with dual potentials,
//! O(n^2 m). The scan order is fixed, so the solver is deterministic: equal
//! inputs always produce the same optimal assignment, with ties resolved by
//! the lowest-index column encountered first.

/// Solve the rectangular linear assignment problem on a dense cost matrix.
///
/// Returns `min(rows, cols)` pairs `(row, col)` minimizing the total cost,
/// sorted by row index. Empty inputs yield an empty assignment.
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let rows = cost.len();
    let cols = if rows == 0 { 0 } else { cost[0].len() };
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    debug_assert!(cost.iter().all(|r| r.len() == cols));

    let mut pairs = if rows <= cols {
        solve(rows, cols, |i, j| cost[i][j])
    } else {
        solve(cols, rows, |i, j| cost[j][i])
            .into_iter()
            .map(|(i, j)| (j, i))
            .collect()
    };
    pairs.sort_unstable();
    pairs
}

/// Total cost of an assignment under a cost matrix.
pub fn assignment_cost(cost: &[Vec<f64>], pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(i, j)| cost[i][j]).sum()
}

/// Core solver; requires n <= m. Indices are 1-based internally with a
/// virtual column 0 used to seed each augmenting search.
fn solve(n: usize, m: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<(usize, usize)> {
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut row_of = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];

    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
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
            for j in 0..=m {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    (1..=m)
        .filter(|&j| row_of[j] != 0)
        .map(|j| (row_of[j] - 1, j - 1))
        .collect()
}

#[cfg(test)]
pub(crate) mod brute {
    //! Exhaustive oracle: enumerate every injective row -> column map in
    //! lexicographic order, keeping the strictly best one seen.

    pub fn best_assignment(cost: &[Vec<f64>]) -> (Vec<(usize, usize)>, f64) {
        let rows = cost.len();
        let cols = if rows == 0 { 0 } else { cost[0].len() };
        if rows == 0 || cols == 0 {
            return (Vec::new(), 0.0);
        }
        let swap = rows > cols;
        let (n, m) = if swap { (cols, rows) } else { (rows, cols) };
        let at = |i: usize, j: usize| if swap { cost[j][i] } else { cost[i][j] };

        let mut best: Option<(Vec<usize>, f64)> = None;
        let mut chosen = vec![usize::MAX; n];
        let mut taken = vec![false; m];
        #[allow(clippy::too_many_arguments)]
        fn recurse(
            i: usize,
            n: usize,
            m: usize,
            at: &impl Fn(usize, usize) -> f64,
            chosen: &mut Vec<usize>,
            taken: &mut Vec<bool>,
            acc: f64,
            best: &mut Option<(Vec<usize>, f64)>,
        ) {
            if i == n {
                if best.as_ref().is_none_or(|(_, c)| acc < *c) {
                    *best = Some((chosen.clone(), acc));
                }
                return;
            }
            for j in 0..m {
                if !taken[j] {
                    taken[j] = true;
                    chosen[i] = j;
                    recurse(i + 1, n, m, at, chosen, taken, acc + at(i, j), best);
                    taken[j] = false;
                }
            }
        }
        recurse(0, n, m, &at, &mut chosen, &mut taken, 0.0, &mut best);
        let (cols_for_row, total) = best.unwrap();
        let mut pairs: Vec<(usize, usize)> = cols_for_row
            .into_iter()
            .enumerate()
            .map(|(i, j)| if swap { (j, i) } else { (i, j) })
            .collect();
        pairs.sort_unstable();
        (pairs, total)
    }
}
