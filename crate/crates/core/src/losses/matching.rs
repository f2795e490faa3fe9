//! Matching cost and minimum-cost bipartite assignment.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::eval::boxes::{giou_unchecked, BBox};
use crate::error::{DcaError, Result};

/// Weights of the classification, L1 and GIoU terms, shared by the matching
/// cost and the box losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { cls: 2.0, l1: 5.0, giou: 2.0 }
    }
}

/// A box target; `column` indexes the classifier output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub bbox: BBox,
    pub column: usize,
    pub pseudo: bool,
}

pub(crate) fn box_row(boxes: &Array2<f64>, i: usize) -> BBox {
    BBox::new(boxes[[i, 0]], boxes[[i, 1]], boxes[[i, 2]], boxes[[i, 3]])
}

pub(crate) fn l1_distance(a: &BBox, b: &BBox) -> f64 {
    a.to_array().iter().zip(b.to_array()).map(|(x, y)| (x - y).abs()).sum()
}

/// `N × G` cost: `λ_cls·(−P[i][c_j]) + λ_L1·‖B_i − b_j‖₁ + λ_iou·(1 − GIoU)`.
pub fn match_cost(p: &Array2<f64>, boxes: &Array2<f64>, targets: &[Target], w: &LossWeights) -> Array2<f64> {
    let n = p.nrows();
    Array2::from_shape_fn((n, targets.len()), |(i, j)| {
        let t = &targets[j];
        let b = box_row(boxes, i);
        w.cls * -p[[i, t.column]] + w.l1 * l1_distance(&b, &t.bbox) + w.giou * (1.0 - giou_unchecked(&b, &t.bbox))
    })
}

/// Matched `(query, target)` pairs sorted by query.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MatchAssignment {
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_queries: Vec<usize>,
}

impl MatchAssignment {
    pub fn total_cost(&self, cost: &Array2<f64>) -> f64 {
        self.pairs.iter().map(|&(i, j)| cost[[i, j]]).sum()
    }

    /// Query matched to target `j`, if any.
    pub fn query_of(&self, target: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.1 == target).map(|p| p.0)
    }
}

/// Minimum-cost injective assignment of `min(N, G)` pairs.
///
/// Shortest augmenting paths with potentials, `O(n²m)` for `n ≤ m`. Rows are
/// inserted in index order and columns scanned in index order, so the result
/// is a deterministic function of the matrix.
pub fn hungarian_match(cost: &Array2<f64>) -> Result<MatchAssignment> {
    if cost.iter().any(|v| !v.is_finite()) {
        return Err(DcaError::Numeric("non-finite entry in the matching cost".into()));
    }
    let (n, g) = cost.dim();
    let transposed = n > g;
    let pairs_small = if transposed { solve(&cost.t().to_owned()) } else { solve(cost) };
    let mut pairs: Vec<(usize, usize)> =
        pairs_small.into_iter().map(|(r, c)| if transposed { (c, r) } else { (r, c) }).collect();
    pairs.sort_unstable();
    let mut matched = vec![false; n];
    for &(q, _) in &pairs {
        matched[q] = true;
    }
    let unmatched_queries = (0..n).filter(|&q| !matched[q]).collect();
    Ok(MatchAssignment { pairs, unmatched_queries })
}

/// Assigns every row of an `n × m` matrix (`n ≤ m`) to a distinct column.
fn solve(a: &Array2<f64>) -> Vec<(usize, usize)> {
    let (n, m) = a.dim();
    if n == 0 {
        return Vec::new();
    }
    // 1-based arrays; column 0 is a virtual source.
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
                let cur = a[[i0 - 1, j - 1]] - u[i0] - v[j];
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
    (1..=m).filter(|&j| owner[j] != 0).map(|j| (owner[j] - 1, j - 1)).collect()
}
