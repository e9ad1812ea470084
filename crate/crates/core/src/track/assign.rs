//! Minimum-cost linear assignment (Kuhn–Munkres with potentials, O(n^3)).

/// Result of solving one assignment problem.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    /// Matched (row, col) pairs, ordered by row index.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_rows: Vec<usize>,
    pub unmatched_cols: Vec<usize>,
}

/// Solves the rectangular assignment problem on `cost`, then drops any pair
/// whose cost exceeds `max_cost`, reporting its row and column as unmatched.
///
/// The solution is deterministic: rows are scanned in order, so equal-cost
/// assignments resolve to the lowest row index first.
pub fn assign(cost: &[Vec<f64>], max_cost: f64) -> Assignment {
    let rows = cost.len();
    let cols = cost.first().map_or(0, |r| r.len());
    if rows == 0 || cols == 0 {
        return Assignment {
            pairs: Vec::new(),
            unmatched_rows: (0..rows).collect(),
            unmatched_cols: (0..cols).collect(),
        };
    }

    // Pad to square with zero-cost dummy cells. Dummy rows/cols carry a
    // constant cost per line, so they shift every perfect matching's total by
    // the same amount and cannot change which real pairing is optimal.
    let dim = rows.max(cols);
    let at = |r: usize, c: usize| -> f64 {
        if r < rows && c < cols {
            cost[r][c]
        } else {
            0.0
        }
    };

    // Potentials formulation, 1-indexed; p[j] is the row matched to col j.
    let mut u = vec![0.0_f64; dim + 1];
    let mut v = vec![0.0_f64; dim + 1];
    let mut p = vec![0_usize; dim + 1];
    let mut way = vec![0_usize; dim + 1];

    for i in 1..=dim {
        p[0] = i;
        let mut j0 = 0_usize;
        let mut minv = vec![f64::INFINITY; dim + 1];
        let mut used = vec![false; dim + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0_usize;
            for j in 1..=dim {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=dim {
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

    let mut row_of_col = vec![usize::MAX; cols];
    for j in 1..=dim {
        if j - 1 < cols && p[j] >= 1 && p[j] - 1 < rows {
            row_of_col[j - 1] = p[j] - 1;
        }
    }

    let mut pairs = Vec::new();
    let mut matched_rows = vec![false; rows];
    let mut matched_cols = vec![false; cols];
    let mut by_row: Vec<(usize, usize)> = row_of_col
        .iter()
        .enumerate()
        .filter(|(_, &r)| r != usize::MAX)
        .map(|(c, &r)| (r, c))
        .collect();
    by_row.sort_unstable();
    for (r, c) in by_row {
        if cost[r][c] <= max_cost {
            pairs.push((r, c));
            matched_rows[r] = true;
            matched_cols[c] = true;
        }
    }

    Assignment {
        pairs,
        unmatched_rows: (0..rows).filter(|&r| !matched_rows[r]).collect(),
        unmatched_cols: (0..cols).filter(|&c| !matched_cols[c]).collect(),
    }
}
