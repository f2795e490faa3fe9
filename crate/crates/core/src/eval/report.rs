//! Evaluation over held-out samples and the forgetting analysis.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use super::ap::{average_precision, coco_thresholds, mean_defined, Interpolation};
use super::boxes::BBox;
use super::metrics::{assign_queries, gap_metrics, recall_counts, recognition_counts, Ratio};
use crate::datagen::{BoxAnnotation, DetectionSample, IncrementalProtocol};
use crate::detector::{fuse, postprocess, Detection, Detector, DEFAULT_TOP_K};
use crate::error::{DcaError, Result};
use crate::semantics::SemanticTable;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub top_k: usize,
    /// IoU threshold of the class-agnostic recall.
    pub recall_iou: f64,
    pub interpolation: Interpolation,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { top_k: DEFAULT_TOP_K, recall_iou: 0.5, interpolation: Interpolation::Coco101 }
    }
}

/// Per-image model outputs needed for scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub boxes: Array2<f64>,
    pub h: Array2<f64>,
    pub s: Option<Array2<f64>>,
    pub p: Array2<f64>,
}

impl Prediction {
    /// Fused probabilities at another `beta`; the linear head alone when the
    /// model has no semantic head.
    pub fn refused(&self, beta: f64) -> Array2<f64> {
        match &self.s {
            Some(s) => Zip::from(&self.h).and(s).map_collect(|&h, &s| fuse(h, s, beta)),
            None => self.h.clone(),
        }
    }
}

pub fn collect_predictions(model: &Detector, table: &SemanticTable, samples: &[DetectionSample]) -> Result<Vec<Prediction>> {
    let q_se = model.semantic_rows(table)?;
    samples
        .iter()
        .map(|s| {
            let out = model.forward_with_rows(&s.pixel_matrix(), &q_se)?;
            Ok(Prediction { boxes: out.boxes, h: out.h, s: out.s, p: out.p })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    /// AP averaged over IoU 0.50:0.95, by class id.
    pub per_class_ap: BTreeMap<usize, f64>,
    pub per_class_ap50: BTreeMap<usize, f64>,
    pub map50: f64,
    pub map_coco: f64,
    pub class_agnostic_recall: Option<f64>,
    pub old_class_accuracy: Option<f64>,
    pub abs_gap: Option<f64>,
    pub rel_gap: Option<f64>,
    /// Evaluated classes without ground truth; excluded from the means.
    pub classes_without_gt: Vec<usize>,
}

impl EvalReport {
    /// Mean AP50 over a class subset (classes without ground truth skipped).
    pub fn map50_over(&self, classes: &[usize]) -> Option<f64> {
        mean_defined(classes.iter().map(|c| self.per_class_ap50.get(c).copied()))
    }

    /// Fills the gap fields from an upper-bound report (on mAP50).
    pub fn with_upper_bound(mut self, upper: &EvalReport) -> Result<Self> {
        let (abs, rel) = gap_metrics(self.map50, upper.map50)?;
        self.abs_gap = Some(abs);
        self.rel_gap = Some(rel);
        Ok(self)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| DcaError::io(path, e))
    }
}

fn restrict(samples: &[DetectionSample], classes: &[usize]) -> Vec<Vec<BoxAnnotation>> {
    samples
        .iter()
        .map(|s| s.annotations.iter().filter(|a| classes.contains(&a.class_id)).copied().collect())
        .collect()
}

fn rows_as_boxes(boxes: &Array2<f64>) -> Vec<BBox> {
    boxes.rows().into_iter().map(|r| BBox::new(r[0], r[1], r[2], r[3])).collect()
}

/// Scores cached predictions with fused probabilities `scores[i]`. Ground
/// truth is restricted to the model's classes.
pub fn report_from_scores(
    preds: &[Prediction],
    scores: &[Array2<f64>],
    class_ids: &[usize],
    samples: &[DetectionSample],
    old_classes: &[usize],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if preds.len() != samples.len() || scores.len() != samples.len() {
        return Err(DcaError::Shape("predictions and samples differ in length".into()));
    }
    let gts = restrict(samples, class_ids);
    let dets: Vec<Vec<Detection>> =
        preds.iter().zip(scores).map(|(p, s)| postprocess(&p.boxes, s, class_ids, opts.top_k)).collect();
    let ap50 = average_precision(&dets, &gts, class_ids, 0.5, opts.interpolation);
    let mut per_iou = Vec::new();
    for thr in coco_thresholds() {
        per_iou.push(average_precision(&dets, &gts, class_ids, thr, opts.interpolation));
    }
    let mut report = EvalReport::default();
    for &c in class_ids {
        match ap50[&c] {
            Some(v) => {
                report.per_class_ap50.insert(c, v);
                let coco = per_iou.iter().map(|m| m[&c].unwrap_or(0.0)).sum::<f64>() / per_iou.len() as f64;
                report.per_class_ap.insert(c, coco);
            }
            None => report.classes_without_gt.push(c),
        }
    }
    report.map50 = mean_defined(report.per_class_ap50.values().map(|&v| Some(v))).unwrap_or(0.0);
    report.map_coco = mean_defined(report.per_class_ap.values().map(|&v| Some(v))).unwrap_or(0.0);
    let mut recall = Ratio::default();
    let mut accuracy = Ratio::default();
    for ((pred, score), gt) in preds.iter().zip(scores).zip(&gts) {
        let gt_boxes: Vec<BBox> = gt.iter().map(|a| a.bbox).collect();
        recall.add(recall_counts(&rows_as_boxes(&pred.boxes), &gt_boxes, opts.recall_iou));
        accuracy.add(recognition_counts(&pred.boxes, score, class_ids, gt, old_classes)?);
    }
    report.class_agnostic_recall = recall.value();
    report.old_class_accuracy = accuracy.value();
    Ok(report)
}

/// Runs the model over held-out samples and scores all of its classes.
pub fn evaluate(
    model: &Detector,
    table: &SemanticTable,
    samples: &[DetectionSample],
    old_classes: &[usize],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let preds = collect_predictions(model, table, samples)?;
    let scores: Vec<Array2<f64>> = preds.iter().map(|p| p.p.clone()).collect();
    report_from_scores(&preds, &scores, model.class_ids(), samples, old_classes, opts)
}

/// One phase of the forgetting analysis. "Base" classes are those of the
/// first phase; "future" classes are those not yet introduced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingRow {
    pub phase: usize,
    pub seen_recall: Option<f64>,
    pub base_recall: Option<f64>,
    pub future_recall: Option<f64>,
    pub base_accuracy: Option<f64>,
    pub delta_base_recall: Option<f64>,
    pub delta_base_accuracy: Option<f64>,
}

/// Fractional decrease from `before` to `after`.
pub fn relative_drop(before: f64, after: f64) -> Option<f64> {
    (before > 0.0).then(|| (before - after) / before)
}

fn subtract(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    Some(a? - b?)
}

/// Recall of seen, base and future classes plus base-class recognition
/// accuracy for a sequence of phase models (`models[t]` is phase `t + 1`).
pub fn forgetting_report(
    models: &[Detector],
    table: &SemanticTable,
    samples: &[DetectionSample],
    protocol: &IncrementalProtocol,
    recall_iou: f64,
) -> Result<Vec<ForgettingRow>> {
    let base = protocol.phase_classes(1)?.to_vec();
    let mut rows: Vec<ForgettingRow> = Vec::new();
    for (i, model) in models.iter().enumerate() {
        let phase = i + 1;
        let seen = protocol.visible_classes(phase)?;
        let future = protocol.future_classes(phase)?;
        let preds = collect_predictions(model, table, samples)?;
        let (mut r_seen, mut r_base, mut r_future, mut acc) =
            (Ratio::default(), Ratio::default(), Ratio::default(), Ratio::default());
        for (pred, sample) in preds.iter().zip(samples) {
            let boxes = rows_as_boxes(&pred.boxes);
            let pick = |cs: &[usize]| -> Vec<BBox> {
                sample.annotations.iter().filter(|a| cs.contains(&a.class_id)).map(|a| a.bbox).collect()
            };
            r_seen.add(recall_counts(&boxes, &pick(&seen), recall_iou));
            r_base.add(recall_counts(&boxes, &pick(&base), recall_iou));
            r_future.add(recall_counts(&boxes, &pick(&future), recall_iou));
            acc.add(recognition_counts(&pred.boxes, &pred.p, model.class_ids(), &sample.annotations, &base)?);
        }
        let prev = rows.last();
        rows.push(ForgettingRow {
            phase,
            seen_recall: r_seen.value(),
            base_recall: r_base.value(),
            future_recall: r_future.value(),
            base_accuracy: acc.value(),
            delta_base_recall: prev.and_then(|p| subtract(r_base.value(), p.base_recall)),
            delta_base_accuracy: prev.and_then(|p| subtract(acc.value(), p.base_accuracy)),
        });
    }
    Ok(rows)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn forgetting_csv(rows: &[ForgettingRow]) -> String {
    let mut out = String::from("phase,seen_recall,base_recall,future_recall,base_accuracy,delta_base_recall,delta_base_accuracy\n");
    for r in rows {
        let cells = [r.seen_recall, r.base_recall, r.future_recall, r.base_accuracy, r.delta_base_recall, r.delta_base_accuracy];
        let cells: Vec<String> = cells.iter().map(|&v| fmt_opt(v)).collect();
        let _ = writeln!(out, "{},{}", r.phase, cells.join(","));
    }
    out
}

/// Embedding row of one ground-truth object.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub phase: usize,
    pub kind: &'static str,
    pub class_id: usize,
    pub values: Vec<f64>,
}

/// `E_local` and `E_cls` rows of the queries assigned to each ground-truth
/// box, for external plotting.
pub fn export_features(
    model: &Detector,
    phase: usize,
    table: &SemanticTable,
    samples: &[DetectionSample],
) -> Result<Vec<FeatureRow>> {
    let q_se = model.semantic_rows(table)?;
    let mut rows = Vec::new();
    for s in samples {
        let out = model.forward_with_rows(&s.pixel_matrix(), &q_se)?;
        let gt: Vec<BBox> = s.annotations.iter().map(|a| a.bbox).collect();
        for (j, q) in assign_queries(&out.boxes, &gt)? {
            let class_id = s.annotations[j].class_id;
            rows.push(FeatureRow { phase, kind: "local", class_id, values: out.e_local.row(q).to_vec() });
            rows.push(FeatureRow { phase, kind: "cls", class_id, values: out.e_cls.row(q).to_vec() });
        }
    }
    Ok(rows)
}

pub fn feature_csv(rows: &[FeatureRow]) -> String {
    let d = rows.first().map_or(0, |r| r.values.len());
    let mut out = String::from("phase,kind,class_id");
    for i in 0..d {
        let _ = write!(out, ",dim_{i}");
    }
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{},{},{}", r.phase, r.kind, r.class_id);
        for v in &r.values {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}
