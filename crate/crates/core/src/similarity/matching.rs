//! Maximum-score one-to-one concept matching (Hungarian algorithm).

use serde::{Deserialize, Serialize};

use super::ucs::UcsMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub row: usize,
    pub col: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptMatching {
    /// Sorted by row.
    pub pairs: Vec<MatchedPair>,
    pub total_score: f64,
}

impl ConceptMatching {
    /// Column order that puts matched pairs on the diagonal; unmatched
    /// columns follow in ascending order.
    pub fn column_order(&self, n_cols: usize) -> Vec<usize> {
        let mut by_row = self.pairs.clone();
        by_row.sort_by_key(|p| p.row);
        let mut order: Vec<usize> = by_row.iter().map(|p| p.col).collect();
        let rest: Vec<usize> = (0..n_cols).filter(|c| !order.contains(c)).collect();
        order.extend(rest);
        order
    }
}

/// Minimum-cost assignment of every row to a distinct column (`rows ≤ cols`).
/// Returns the column for each row. Shortest augmenting paths with potentials, O(n²m).
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    assert!(n <= m, "assignment needs rows <= cols");
    // 1-based arrays with a virtual column 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut row_of = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
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
    let mut col_of = vec![0usize; n];
    for j in 1..=m {
        if row_of[j] > 0 {
            col_of[row_of[j] - 1] = j - 1;
        }
    }
    col_of
}

/// Best total score when every row of `score` (restricted to `rows` × `cols`)
/// is matched; `rows.len() ≤ cols.len()`.
fn best_total(score: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let cost: Vec<Vec<f64>> = rows
        .iter()
        .map(|&r| cols.iter().map(|&c| -score[r][c]).collect())
        .collect();
    min_cost_assignment(&cost)
        .into_iter()
        .enumerate()
        .map(|(i, j)| score[rows[i]][cols[j]])
        .sum()
}

/// Maximum-score assignment on a dense score table. Among optimal
/// assignments the lexicographically smallest is returned: the smaller side
/// is walked in index order and each element takes the lowest-index partner
/// that still allows an optimal completion.
pub fn max_score_assignment(score: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let rows = score.len();
    let cols = score.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    let transposed = rows > cols;
    let table: Vec<Vec<f64>> = if transposed {
        (0..cols).map(|c| (0..rows).map(|r| score[r][c]).collect()).collect()
    } else {
        score.to_vec()
    };
    let (n, m) = (table.len(), table[0].len());
    let mut free_cols: Vec<usize> = (0..m).collect();
    let mut target = best_total(&table, &(0..n).collect::<Vec<_>>(), &free_cols);
    let scale = table.iter().flatten().fold(1.0f64, |a, v| a.max(v.abs()));
    let tol = 1e-9 * scale * n as f64;
    let mut pairs = Vec::with_capacity(n);
    for r in 0..n {
        let rest: Vec<usize> = (r + 1..n).collect();
        let mut chosen = None;
        for (pos, &c) in free_cols.iter().enumerate() {
            let others: Vec<usize> = free_cols.iter().copied().filter(|&x| x != c).collect();
            let total = table[r][c] + best_total(&table, &rest, &others);
            if total >= target - tol {
                chosen = Some(pos);
                target -= table[r][c];
                break;
            }
        }
        // Some column always completes an optimum; fall back to the first
        // free one only if rounding defeated the tolerance.
        let pos = chosen.unwrap_or(0);
        let c = free_cols.remove(pos);
        pairs.push(if transposed { (c, r) } else { (r, c) });
    }
    pairs.sort();
    pairs
}

/// Matches rows to columns of a UCS matrix maximizing the summed score.
pub fn match_concepts(matrix: &UcsMatrix) -> ConceptMatching {
    let score: Vec<Vec<f64>> = (0..matrix.rows())
        .map(|r| (0..matrix.cols()).map(|c| matrix.get(r, c)).collect())
        .collect();
    let pairs: Vec<MatchedPair> = max_score_assignment(&score)
        .into_iter()
        .map(|(row, col)| MatchedPair {
            row,
            col,
            score: score[row][col],
        })
        .collect();
    let total_score = pairs.iter().map(|p| p.score).sum();
    ConceptMatching { pairs, total_score }
}
