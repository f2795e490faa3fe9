//! Pseudo labels from a frozen model and the masks derived from them.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::matching::box_row;
use crate::detector::{postprocess, Detector};
use crate::eval::boxes::{iou_unchecked, BBox};
use crate::error::Result;
use crate::semantics::SemanticTable;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PseudoLabelConfig {
    /// Minimum old-model score.
    pub threshold: f64,
    /// Candidates overlapping a current ground-truth box above this IoU are dropped.
    pub gt_iou_drop: f64,
    pub top_k: usize,
}

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        Self { threshold: 0.4, gt_iou_drop: 0.7, top_k: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    pub boxes: Vec<BBox>,
    pub class_ids: Vec<usize>,
    pub scores: Vec<f64>,
    pub source_query: Vec<usize>,
}

impl PseudoLabelSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Confident old-class detections from precomputed old-model outputs. Each
/// query contributes at most its best-scoring class.
pub fn pseudo_labels_from_output(
    boxes: &Array2<f64>,
    scores: &Array2<f64>,
    old_class_ids: &[usize],
    current_gt: &[BBox],
    cfg: &PseudoLabelConfig,
) -> PseudoLabelSet {
    let mut out = PseudoLabelSet::default();
    let mut seen = vec![false; boxes.nrows()];
    for det in postprocess(boxes, scores, old_class_ids, cfg.top_k) {
        if det.score < cfg.threshold {
            break;
        }
        if std::mem::replace(&mut seen[det.query], true) {
            continue;
        }
        let b = box_row(boxes, det.query);
        if b.validate().is_err() || current_gt.iter().any(|g| iou_unchecked(&b, g) > cfg.gt_iou_drop) {
            continue;
        }
        out.boxes.push(b);
        out.class_ids.push(det.class_id);
        out.scores.push(det.score);
        out.source_query.push(det.query);
    }
    out
}

/// Runs the frozen model on `image` and keeps its confident detections.
/// A model without classes (no previous phase) yields an empty set.
pub fn pseudo_label(
    old: &Detector,
    image: &Array2<f64>,
    table: &SemanticTable,
    current_gt: &[BBox],
    cfg: &PseudoLabelConfig,
) -> Result<PseudoLabelSet> {
    if old.num_classes() == 0 {
        return Ok(PseudoLabelSet::default());
    }
    let out = old.forward(image, table)?;
    Ok(pseudo_labels_from_output(&out.boxes, &out.p, old.class_ids(), current_gt, cfg))
}

/// Feature tokens on a `grid × grid` map whose cell centers fall inside any box.
pub fn token_mask(grid: usize, boxes: &[BBox]) -> Vec<usize> {
    (0..grid * grid)
        .filter(|&i| {
            let (y, x) = (i / grid, i % grid);
            let (u, v) = ((x as f64 + 0.5) / grid as f64, (y as f64 + 0.5) / grid as f64);
            boxes.iter().any(|b| b.contains(u, v))
        })
        .collect()
}
