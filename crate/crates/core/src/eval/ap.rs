//! Average precision with greedy per-class matching.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::boxes::{iou_unchecked, BBox};
use crate::datagen::BoxAnnotation;
use crate::detector::Detection;

/// Precision-envelope sampling scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Interpolation {
    /// 101 recall points, 0.00 to 1.00.
    #[default]
    Coco101,
    /// 11 recall points, 0.0 to 1.0.
    Voc11,
}

impl Interpolation {
    fn recall_points(self) -> Vec<f64> {
        match self {
            Interpolation::Coco101 => (0..=100).map(|i| i as f64 / 100.0).collect(),
            Interpolation::Voc11 => (0..=10).map(|i| i as f64 / 10.0).collect(),
        }
    }
}

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// True/false-positive flags of one class's detections in descending score
/// order, plus the number of ground-truth boxes.
pub fn match_class(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<BoxAnnotation>],
    class_id: usize,
    iou_threshold: f64,
) -> (Vec<bool>, usize) {
    let gts: Vec<Vec<BBox>> = ground_truth
        .iter()
        .map(|g| g.iter().filter(|a| a.class_id == class_id).map(|a| a.bbox).collect())
        .collect();
    let n_gt = gts.iter().map(Vec::len).sum();
    let mut dets: Vec<(usize, &Detection)> = detections
        .iter()
        .enumerate()
        .flat_map(|(img, ds)| ds.iter().filter(|d| d.class_id == class_id).map(move |d| (img, d)))
        .collect();
    // Stable: equal scores keep (image, rank) order.
    dets.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let flags = dets
        .iter()
        .map(|&(img, d)| {
            let best = gts[img]
                .iter()
                .enumerate()
                .filter(|(j, _)| !used[img][*j])
                .map(|(j, g)| (j, iou_unchecked(&d.bbox, g)))
                .filter(|&(_, v)| v >= iou_threshold)
                .fold(None::<(usize, f64)>, |acc, (j, v)| match acc {
                    Some((_, bv)) if bv >= v => acc,
                    _ => Some((j, v)),
                });
            match best {
                Some((j, _)) => {
                    used[img][j] = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    (flags, n_gt)
}

/// Interpolated AP from ranked TP flags; `None` without ground truth.
pub fn ap_from_flags(flags: &[bool], n_gt: usize, interp: Interpolation) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(flags.len());
    for (i, &f) in flags.iter().enumerate() {
        tp += f as usize;
        curve.push((tp as f64 / n_gt as f64, tp as f64 / (i + 1) as f64));
    }
    // Envelope: precision made non-increasing from the right.
    let mut envelope: Vec<f64> = curve.iter().map(|c| c.1).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let points = interp.recall_points();
    let total: f64 = points
        .iter()
        .map(|&r| {
            let idx = curve.partition_point(|c| c.0 < r - 1e-12);
            envelope.get(idx).copied().unwrap_or(0.0)
        })
        .sum();
    Some(total / points.len() as f64)
}

/// Per-class AP at one IoU threshold. Classes without ground truth map to `None`.
pub fn average_precision(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<BoxAnnotation>],
    classes: &[usize],
    iou_threshold: f64,
    interp: Interpolation,
) -> BTreeMap<usize, Option<f64>> {
    classes
        .iter()
        .map(|&c| {
            let (flags, n_gt) = match_class(detections, ground_truth, c, iou_threshold);
            (c, ap_from_flags(&flags, n_gt, interp))
        })
        .collect()
}

/// Mean over the classes that have ground truth.
pub fn mean_defined(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let defined: Vec<f64> = values.into_iter().flatten().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}
