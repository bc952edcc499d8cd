//! Minimum-cost bipartite assignment and the two-stage matching cascade.

use thiserror::Error;

use crate::geometry::{iou, Box2D};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssociationError {
    #[error("cost matrix is {found:?}, expected {expected:?}")]
    ShapeMismatch { expected: (usize, usize), found: (usize, usize) },
}

/// Dense row-major `tracks × detections` cost matrix. Entries are finite and
/// non-negative, or [`CostMatrix::FORBIDDEN`].
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub const FORBIDDEN: f64 = f64::INFINITY;

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Panics if the rows are ragged.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged cost matrix");
        Self { rows: rows.len(), cols, data: rows.concat() }
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn forbid(&mut self, r: usize, c: usize) {
        self.set(r, c, Self::FORBIDDEN);
    }

    pub fn is_forbidden(&self, r: usize, c: usize) -> bool {
        !self.get(r, c).is_finite()
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0 || self.cols == 0
    }
}

/// One-to-one matching plus whatever was left over on each side.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Assignment {
    /// `(row, col)` pairs sorted by row.
    pub matches: Vec<(usize, usize)>,
    pub unmatched_rows: Vec<usize>,
    pub unmatched_cols: Vec<usize>,
}

impl Assignment {
    fn from_pairs(rows: usize, cols: usize, mut matches: Vec<(usize, usize)>) -> Self {
        matches.sort_unstable();
        let mut row_used = vec![false; rows];
        let mut col_used = vec![false; cols];
        for &(r, c) in &matches {
            row_used[r] = true;
            col_used[c] = true;
        }
        Self {
            unmatched_rows: (0..rows).filter(|&r| !row_used[r]).collect(),
            unmatched_cols: (0..cols).filter(|&c| !col_used[c]).collect(),
            matches,
        }
    }

    pub fn total_cost(&self, costs: &CostMatrix) -> f64 {
        self.matches.iter().map(|&(r, c)| costs.get(r, c)).sum()
    }
}

/// Shortest-augmenting-path Hungarian method with row/column potentials,
/// `O(n²m)` for `n ≤ m`. Expects `n ≤ m` and finite costs.
fn hungarian_rows_le_cols(n: usize, m: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    // 1-based arrays; index 0 is the virtual root column.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
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
    let mut row_to_col = vec![usize::MAX; n];
    for j in 1..=m {
        if owner[j] != 0 {
            row_to_col[owner[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Minimum-total-cost one-to-one assignment of cardinality
/// `min(rows, cols)`, with forbidden pairs dropped from the result.
///
/// Forbidden entries are replaced by a penalty larger than any complete
/// assignment of allowed pairs, so the solver first maximises the number of
/// allowed pairs and then minimises their cost.
pub fn solve_assignment(costs: &CostMatrix) -> Assignment {
    let (rows, cols) = costs.shape();
    if costs.is_empty() {
        return Assignment::from_pairs(rows, cols, Vec::new());
    }
    let max_finite = costs.data.iter().copied().filter(|v| v.is_finite()).fold(0.0f64, f64::max);
    let penalty = (max_finite.max(1.0)) * (rows.min(cols) as f64 + 1.0) * 2.0;
    let cost = |r: usize, c: usize| {
        let v = costs.get(r, c);
        if v.is_finite() {
            v
        } else {
            penalty
        }
    };
    let pairs: Vec<(usize, usize)> = if rows <= cols {
        hungarian_rows_le_cols(rows, cols, cost).into_iter().enumerate().collect()
    } else {
        hungarian_rows_le_cols(cols, rows, |c, r| cost(r, c)).into_iter().enumerate().map(|(c, r)| (r, c)).collect()
    };
    let pairs = pairs.into_iter().filter(|&(r, c)| !costs.is_forbidden(r, c)).collect();
    Assignment::from_pairs(rows, cols, pairs)
}

/// Drops pairs whose cost exceeds `threshold`; a cost equal to the
/// threshold is kept.
pub fn gate_matches(assignment: Assignment, costs: &CostMatrix, threshold: f64) -> Assignment {
    let keep = assignment.matches.into_iter().filter(|&(r, c)| costs.get(r, c) <= threshold).collect();
    Assignment::from_pairs(costs.rows(), costs.cols(), keep)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssociationConfig {
    /// Accepted in configs but not read by the pipeline.
    pub high_conf_threshold: f64,
    /// Detections below this confidence are discarded outright.
    pub low_conf_threshold: f64,
    /// Splits high- from low-confidence detections; only detections at or
    /// above it start tracks.
    pub detection_threshold: f64,
    /// Maximum fused cost accepted in the first stage.
    pub match_cost_threshold: f64,
    /// Minimum IoU accepted in the second stage.
    pub second_stage_iou_threshold: f64,
    /// Maximum raw cosine distance allowed in the first stage.
    pub appearance_sim_threshold: f64,
    /// Maximum IoU distance `1 − iou` allowed in the first stage.
    pub linear_iou_threshold: f64,
}

impl Default for AssociationConfig {
    fn default() -> Self {
        Self {
            high_conf_threshold: 0.5,
            low_conf_threshold: 0.1,
            detection_threshold: 0.6,
            match_cost_threshold: 0.85,
            second_stage_iou_threshold: 0.5,
            appearance_sim_threshold: 0.25,
            linear_iou_threshold: 0.75,
        }
    }
}

fn check_shape(m: &CostMatrix, expected: (usize, usize)) -> Result<(), AssociationError> {
    if m.shape() == expected {
        Ok(())
    } else {
        Err(AssociationError::ShapeMismatch { expected, found: m.shape() })
    }
}

/// First stage: tracks against high-confidence detections on the fused
/// cost. `ious` and `raw_cosine` must be aligned with `fused`; pairs that
/// fail the appearance or IoU-distance limits are forbidden before solving.
pub fn first_stage(
    fused: &CostMatrix,
    ious: &CostMatrix,
    raw_cosine: Option<&CostMatrix>,
    cfg: &AssociationConfig,
) -> Result<Assignment, AssociationError> {
    check_shape(ious, fused.shape())?;
    if let Some(cos) = raw_cosine {
        check_shape(cos, fused.shape())?;
    }
    let mut costs = fused.clone();
    for r in 0..costs.rows() {
        for c in 0..costs.cols() {
            let too_far = 1.0 - ious.get(r, c) > cfg.linear_iou_threshold;
            let unlike = raw_cosine.is_some_and(|m| m.get(r, c) > cfg.appearance_sim_threshold);
            if too_far || unlike {
                costs.forbid(r, c);
            }
        }
    }
    Ok(gate_matches(solve_assignment(&costs), &costs, cfg.match_cost_threshold))
}

/// Second stage: leftover tracks against low-confidence detections on IoU
/// distance, keeping pairs with `iou ≥ second_stage_iou_threshold`.
pub fn second_stage(tracks: &[Box2D], detections: &[Box2D], cfg: &AssociationConfig) -> Assignment {
    let mut costs = CostMatrix::zeros(tracks.len(), detections.len());
    for (r, t) in tracks.iter().enumerate() {
        for (c, d) in detections.iter().enumerate() {
            let o = iou(t, d);
            if o >= cfg.second_stage_iou_threshold {
                costs.set(r, c, 1.0 - o);
            } else {
                costs.forbid(r, c);
            }
        }
    }
    solve_assignment(&costs)
}
