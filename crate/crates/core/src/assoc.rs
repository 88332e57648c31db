//! Frame-level association: motion/appearance cost matrices and optimal
//! one-to-one matching.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AssocError {
    #[error("embedding has zero norm")]
    ZeroVector,
    #[error("cost matrices differ in shape ({0}x{1} vs {2}x{3})")]
    ShapeMismatch(usize, usize, usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssocParams {
    /// Weight on motion cost; `1 - lambda` goes to appearance.
    pub lambda: f64,
    pub ema_alpha: f64,
    /// Fused cost above which a selected pair is left unmatched.
    pub match_threshold: f64,
    /// Pairs with zero IoU and appearance cost above this are gated.
    pub appearance_gate: f64,
}

impl Default for AssocParams {
    fn default() -> Self {
        AssocParams {
            lambda: 0.9,
            ema_alpha: 0.9,
            match_threshold: 0.7,
            appearance_gate: 0.4,
        }
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn normalize(f: &[f64]) -> Result<Vec<f64>, AssocError> {
    let n = l2_norm(f);
    if n == 0.0 || !n.is_finite() {
        return Err(AssocError::ZeroVector);
    }
    Ok(f.iter().map(|x| x / n).collect())
}

/// `(1 - cos) / 2` for unit vectors: identical -> 0, antipodal -> 1.
pub fn cosine_cost(e: &[f64], f_hat: &[f64]) -> f64 {
    let dot: f64 = e.iter().zip(f_hat).map(|(a, b)| a * b).sum();
    ((1.0 - dot) / 2.0).clamp(0.0, 1.0)
}

/// Per-track exponential moving average of unit appearance vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct AppearanceBank {
    alpha: f64,
    vectors: BTreeMap<u64, Vec<f64>>,
}

impl AppearanceBank {
    pub fn new(alpha: f64) -> Self {
        assert!((0.0..1.0).contains(&alpha), "EMA alpha must lie in [0, 1)");
        AppearanceBank {
            alpha,
            vectors: BTreeMap::new(),
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn get(&self, track: u64) -> Option<&[f64]> {
        self.vectors.get(&track).map(Vec::as_slice)
    }

    pub fn remove(&mut self, track: u64) {
        self.vectors.remove(&track);
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// `e <- normalize(alpha * e + (1 - alpha) * f_hat)`; the first
    /// observation seeds `e = f_hat`.
    pub fn ema_update(&mut self, track: u64, f_hat: &[f64]) {
        let alpha = self.alpha;
        match self.vectors.get_mut(&track) {
            None => {
                self.vectors.insert(track, f_hat.to_vec());
            }
            Some(e) => {
                let mixed: Vec<f64> = e.iter().zip(f_hat).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect();
                match normalize(&mixed) {
                    Ok(unit) => *e = unit,
                    Err(_) => {
                        log::warn!("appearance EMA for track {track} cancelled out; reseeding from observation");
                        *e = f_hat.to_vec();
                    }
                }
            }
        }
    }
}

/// Dense cost matrix where `None` marks a gated (infeasible) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Option<f64>>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize) -> Self {
        CostMatrix {
            rows,
            cols,
            data: vec![Some(0.0); rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Option<f64>) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        CostMatrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged cost matrix");
        CostMatrix::from_fn(rows.len(), cols, |r, c| Some(rows[r][c]))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, r: usize, c: usize) -> Option<f64> {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: Option<f64>) {
        self.data[r * self.cols + c] = v;
    }

    pub fn is_unit_range(&self) -> bool {
        self.data.iter().flatten().all(|v| (0.0..=1.0).contains(v))
    }

    fn transposed(&self) -> CostMatrix {
        CostMatrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }
}

/// `lambda * motion + (1 - lambda) * appearance`, gating propagated.
pub fn fuse_costs(motion: &CostMatrix, appearance: &CostMatrix, lambda: f64) -> Result<CostMatrix, AssocError> {
    if motion.shape() != appearance.shape() {
        return Err(AssocError::ShapeMismatch(
            motion.rows,
            motion.cols,
            appearance.rows,
            appearance.cols,
        ));
    }
    let data = motion
        .data
        .iter()
        .zip(&appearance.data)
        .map(|(m, a)| match (m, a) {
            (Some(m), Some(a)) => Some(lambda * m + (1.0 - lambda) * a),
            _ => None,
        })
        .collect();
    Ok(CostMatrix {
        rows: motion.rows,
        cols: motion.cols,
        data,
    })
}

/// Minimum-cost one-to-one assignment.
///
/// Gated entries are never selected. Among assignments the solver first
/// maximizes the number of feasible pairs and then minimizes their total
/// cost. Returned pairs are `(row, col)` sorted by row.
pub fn solve_assignment(costs: &CostMatrix) -> Vec<(usize, usize)> {
    if costs.rows == 0 || costs.cols == 0 {
        return Vec::new();
    }
    if costs.rows > costs.cols {
        let mut pairs: Vec<_> = solve_assignment(&costs.transposed()).into_iter().map(|(c, r)| (r, c)).collect();
        pairs.sort_unstable();
        return pairs;
    }
    let max_abs = costs.data.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let gated = 2.0 * (costs.rows as f64 + 1.0) * (max_abs + 1.0);
    let dense = |r: usize, c: usize| costs.get(r, c).unwrap_or(gated);
    let assignment = shortest_augmenting_path(costs.rows, costs.cols, dense);
    assignment
        .into_iter()
        .enumerate()
        .filter(|&(r, c)| costs.get(r, c).is_some())
        .collect()
}

/// O(n^2 m) Hungarian algorithm with row/column potentials for `n <= m`.
/// Returns the column assigned to every row. Column scans run in index
/// order with strict comparisons, so ties resolve toward lower indices.
fn shortest_augmenting_path(n: usize, m: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    // 1-based arrays with a virtual column 0, following the classic formulation.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut row_of_col = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        row_of_col[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = row_of_col[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
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
            for j in 0..=m {
                if used[j] {
                    u[row_of_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of_col[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of_col[j0] = row_of_col[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of_row = vec![0; n];
    for j in 1..=m {
        if row_of_col[j] != 0 {
            col_of_row[row_of_col[j] - 1] = j - 1;
        }
    }
    col_of_row
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Matching {
    pub matches: Vec<(usize, usize)>,
    pub unmatched_rows: Vec<usize>,
    pub unmatched_cols: Vec<usize>,
}

impl Matching {
    pub fn total_cost(&self, costs: &CostMatrix) -> f64 {
        self.matches.iter().map(|&(r, c)| costs.get(r, c).unwrap_or(0.0)).sum()
    }
}

/// Optimal assignment followed by demotion of pairs costing more than
/// `match_threshold`.
pub fn hungarian(costs: &CostMatrix, match_threshold: f64) -> Matching {
    let mut row_used = vec![false; costs.rows];
    let mut col_used = vec![false; costs.cols];
    let mut matches = Vec::new();
    for (r, c) in solve_assignment(costs) {
        if costs.get(r, c).is_some_and(|v| v <= match_threshold) {
            row_used[r] = true;
            col_used[c] = true;
            matches.push((r, c));
        }
    }
    Matching {
        matches,
        unmatched_rows: (0..costs.rows).filter(|&r| !row_used[r]).collect(),
        unmatched_cols: (0..costs.cols).filter(|&c| !col_used[c]).collect(),
    }
}
