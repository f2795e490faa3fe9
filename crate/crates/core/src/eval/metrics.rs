//! Class-agnostic recall, recognition accuracy at ground-truth locations and
//! gaps to a joint-training upper bound.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::boxes::{iou_unchecked, BBox};
use crate::datagen::BoxAnnotation;
use crate::error::{DcaError, Result};
use crate::losses::hungarian_match;

/// Matched / total counts that can be pooled over images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Ratio {
    pub hits: usize,
    pub total: usize,
}

impl Ratio {
    pub fn add(&mut self, other: Ratio) {
        self.hits += other.hits;
        self.total += other.total;
    }

    /// `None` when nothing was counted.
    pub fn value(&self) -> Option<f64> {
        (self.total > 0).then(|| self.hits as f64 / self.total as f64)
    }
}

/// Greedy one-to-one matching by descending IoU, ignoring classes; counts the
/// ground-truth boxes covered at `iou_threshold` or better.
pub fn recall_counts(pred: &[BBox], gt: &[BBox], iou_threshold: f64) -> Ratio {
    let mut pairs: Vec<(f64, usize, usize)> = gt
        .iter()
        .enumerate()
        .flat_map(|(j, g)| pred.iter().enumerate().map(move |(i, p)| (iou_unchecked(p, g), i, j)))
        .filter(|&(v, _, _)| v >= iou_threshold)
        .collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut pred_used = vec![false; pred.len()];
    let mut gt_used = vec![false; gt.len()];
    let mut hits = 0;
    for (_, i, j) in pairs {
        if !pred_used[i] && !gt_used[j] {
            pred_used[i] = true;
            gt_used[j] = true;
            hits += 1;
        }
    }
    Ratio { hits, total: gt.len() }
}

/// Class-agnostic recall; `None` without ground truth.
pub fn class_agnostic_recall(pred: &[BBox], gt: &[BBox], iou_threshold: f64) -> Option<f64> {
    recall_counts(pred, gt, iou_threshold).value()
}

/// Assigns each ground-truth box to a distinct query by maximum total IoU.
/// Returns `(gt index, query)` pairs.
pub fn assign_queries(pred_boxes: &Array2<f64>, gt: &[BBox]) -> Result<Vec<(usize, usize)>> {
    let n = pred_boxes.nrows();
    let cost = Array2::from_shape_fn((gt.len(), n), |(j, q)| {
        let p = BBox::new(pred_boxes[[q, 0]], pred_boxes[[q, 1]], pred_boxes[[q, 2]], pred_boxes[[q, 3]]);
        -iou_unchecked(&p, &gt[j])
    });
    Ok(hungarian_match(&cost)?.pairs)
}

/// Index of the largest entry of a row; the first one on ties.
pub fn argmax_row(p: &Array2<f64>, row: usize) -> usize {
    let r = p.row(row);
    (0..r.len()).fold(0, |best, k| if r[k] > r[best] { k } else { best })
}

/// Old-class ground-truth boxes whose assigned query's argmax column names
/// the right class. `class_ids` maps columns to global ids.
pub fn recognition_counts(
    pred_boxes: &Array2<f64>,
    p: &Array2<f64>,
    class_ids: &[usize],
    gt: &[BoxAnnotation],
    old_classes: &[usize],
) -> Result<Ratio> {
    let old: Vec<&BoxAnnotation> = gt.iter().filter(|a| old_classes.contains(&a.class_id)).collect();
    if old.is_empty() || class_ids.is_empty() {
        return Ok(Ratio { hits: 0, total: old.len() });
    }
    let boxes: Vec<BBox> = old.iter().map(|a| a.bbox).collect();
    let pairs = assign_queries(pred_boxes, &boxes)?;
    let hits = pairs.iter().filter(|&&(j, q)| class_ids[argmax_row(p, q)] == old[j].class_id).count();
    Ok(Ratio { hits, total: old.len() })
}

/// `(upper − final, (upper − final) / upper)`.
pub fn gap_metrics(final_metric: f64, upper_bound: f64) -> Result<(f64, f64)> {
    if !(upper_bound > 0.0) || !final_metric.is_finite() || !upper_bound.is_finite() {
        return Err(DcaError::Numeric(format!("upper bound {upper_bound} must be positive")));
    }
    let abs = upper_bound - final_metric;
    Ok((abs, abs / upper_bound))
}
