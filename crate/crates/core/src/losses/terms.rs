//! Differentiable loss terms. Every term is built on a [`Tape`]; the plain
//! functions evaluate the same graph on an inference tape.

use dca_autodiff::{Tape, Var};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::matching::{LossWeights, MatchAssignment, Target};
use crate::error::{DcaError, Result};

/// Norm below which a semantic vector counts as zero.
pub const ZERO_NORM: f64 = 1e-12;

/// Parameters of the optional focal classification loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self { alpha: 0.25, gamma: 2.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub weights: LossWeights,
    /// Replaces binary cross-entropy with the focal loss.
    pub focal: Option<FocalParams>,
}

fn zero(t: &mut Tape) -> Var {
    t.constant(Array2::zeros((1, 1)))
}

/// Corner coordinates `(x0, y0, x1, y1)` of an `M × 4` center-format box var.
fn corners(t: &mut Tape, b: Var) -> [Var; 4] {
    let cx = t.slice_cols(b, 0, 1);
    let cy = t.slice_cols(b, 1, 2);
    let w = t.slice_cols(b, 2, 3);
    let h = t.slice_cols(b, 3, 4);
    let hw = t.scale(w, 0.5);
    let hh = t.scale(h, 0.5);
    [t.sub(cx, hw), t.sub(cy, hh), t.add(cx, hw), t.add(cy, hh)]
}

/// Row-wise GIoU (`M × 1`) between two `M × 4` box vars.
pub fn giou_graph(t: &mut Tape, a: Var, b: Var) -> Var {
    let [ax0, ay0, ax1, ay1] = corners(t, a);
    let [bx0, by0, bx1, by1] = corners(t, b);
    let span = |t: &mut Tape, lo: Var, hi: Var| t.sub(hi, lo);
    let ix1 = t.minimum(ax1, bx1);
    let ix0 = t.maximum(ax0, bx0);
    let iw = span(t, ix0, ix1);
    let iw = t.relu(iw);
    let iy1 = t.minimum(ay1, by1);
    let iy0 = t.maximum(ay0, by0);
    let ih = span(t, iy0, iy1);
    let ih = t.relu(ih);
    let inter = t.mul(iw, ih);
    let aw = span(t, ax0, ax1);
    let ah = span(t, ay0, ay1);
    let area_a = t.mul(aw, ah);
    let bw = span(t, bx0, bx1);
    let bh = span(t, by0, by1);
    let area_b = t.mul(bw, bh);
    let both = t.add(area_a, area_b);
    let union = t.sub(both, inter);
    let iou = t.div(inter, union);
    let ex1 = t.maximum(ax1, bx1);
    let ex0 = t.minimum(ax0, bx0);
    let ew = span(t, ex0, ex1);
    let ey1 = t.maximum(ay1, by1);
    let ey0 = t.minimum(ay0, by0);
    let eh = span(t, ey0, ey1);
    let enclose = t.mul(ew, eh);
    let empty = t.sub(enclose, union);
    let penalty = t.div(empty, enclose);
    t.sub(iou, penalty)
}

/// Weighted `(Σ L1, Σ (1 − GIoU))` over rows of two `M × 4` box vars.
fn box_sums(t: &mut Tape, pred: Var, target: Var, w: &LossWeights) -> (Var, Var) {
    let diff = t.sub(pred, target);
    let diff = t.abs(diff);
    let l1 = t.sum(diff);
    let g = giou_graph(t, pred, target);
    let g = t.one_minus(g);
    let g = t.sum(g);
    (t.scale(l1, w.l1), t.scale(g, w.giou))
}

fn target_boxes(targets: &[&Target]) -> Array2<f64> {
    Array2::from_shape_fn((targets.len(), 4), |(i, k)| targets[i].bbox.to_array()[k])
}

/// Classification and box terms of the set-prediction loss.
#[derive(Debug, Clone, Copy)]
pub struct DetectionTerms {
    pub cls: Var,
    pub l1: Var,
    pub giou: Var,
}

/// Set-prediction loss for fused probabilities `p` (N × K) and boxes (N × 4).
/// Matched queries get a one-hot class target, all others an all-zero one.
/// Classification is normalized by `N`, box terms by the number of matches.
pub fn detection_loss_graph(
    t: &mut Tape,
    p: Var,
    boxes: Var,
    targets: &[Target],
    assignment: &MatchAssignment,
    cfg: &LossConfig,
) -> DetectionTerms {
    let (n, k) = t.shape(p);
    let mut onehot = Array2::zeros((n, k));
    for &(q, j) in &assignment.pairs {
        onehot[[q, targets[j].column]] = 1.0;
    }
    let per = match cfg.focal {
        Some(f) => t.focal(p, onehot, f.alpha, f.gamma),
        None => t.bce(p, onehot),
    };
    let cls = t.sum(per);
    let cls = t.scale(cls, 1.0 / n.max(1) as f64);
    if assignment.pairs.is_empty() {
        let (l1, giou) = (zero(t), zero(t));
        return DetectionTerms { cls, l1, giou };
    }
    let queries: Vec<usize> = assignment.pairs.iter().map(|p| p.0).collect();
    let matched: Vec<&Target> = assignment.pairs.iter().map(|p| &targets[p.1]).collect();
    let pred = t.gather_rows(boxes, &queries);
    let tgt = t.constant(target_boxes(&matched));
    let (l1, giou) = box_sums(t, pred, tgt, &cfg.weights);
    let m = 1.0 / queries.len() as f64;
    DetectionTerms { cls, l1: t.scale(l1, m), giou: t.scale(giou, m) }
}

/// Scalar values of [`detection_loss_graph`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DetectionLoss {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
}

impl DetectionLoss {
    pub fn total(&self) -> f64 {
        self.cls + self.l1 + self.giou
    }
}

pub fn detection_loss(
    p: &Array2<f64>,
    boxes: &Array2<f64>,
    targets: &[Target],
    assignment: &MatchAssignment,
    cfg: &LossConfig,
) -> DetectionLoss {
    let mut t = Tape::inference();
    let pv = t.constant(p.clone());
    let bv = t.constant(boxes.clone());
    let terms = detection_loss_graph(&mut t, pv, bv, targets, assignment, cfg);
    DetectionLoss { cls: t.scalar(terms.cls), l1: t.scalar(terms.l1), giou: t.scalar(terms.giou) }
}

/// Semantic consistency: `Σ_l mean_k (1 − cos(q_k, e^l_k))`. Zero-norm rows
/// contribute a cosine of 0; the flag reports whether any occurred.
pub fn consistency_graph(t: &mut Tape, anchors: Var, decoded: &[Var]) -> (Var, bool) {
    let has_zero = |m: &Array2<f64>| m.rows().into_iter().any(|r| r.dot(&r).sqrt() <= ZERO_NORM);
    let mut flagged = has_zero(t.value(anchors));
    let qn = t.normalize_rows(anchors, ZERO_NORM);
    let mut total = zero(t);
    for &e in decoded {
        flagged |= has_zero(t.value(e));
        let en = t.normalize_rows(e, ZERO_NORM);
        let prod = t.mul(qn, en);
        let cos = t.row_sums(prod);
        let gap = t.one_minus(cos);
        let term = t.mean(gap);
        total = t.add(total, term);
    }
    (total, flagged)
}

/// Value of the consistency loss plus the zero-norm flag.
pub fn consistency_loss(anchors: &Array2<f64>, decoded: &[Array2<f64>]) -> Result<(f64, bool)> {
    if let Some(bad) = decoded.iter().find(|e| e.dim() != anchors.dim()) {
        return Err(DcaError::Shape(format!("semantic tokens {:?} vs anchors {:?}", bad.dim(), anchors.dim())));
    }
    let mut t = Tape::inference();
    let a = t.constant(anchors.clone());
    let es: Vec<Var> = decoded.iter().map(|e| t.constant(e.clone())).collect();
    let (v, flag) = consistency_graph(&mut t, a, &es);
    Ok((t.scalar(v), flag))
}

/// Output distillation over `(new query, old query)` pairs: MSE of the old
/// class columns plus the weighted box loss, each averaged over pairs.
pub fn kd_output_graph(
    t: &mut Tape,
    p_new: Var,
    boxes_new: Var,
    p_old: &Array2<f64>,
    boxes_old: &Array2<f64>,
    pairs: &[(usize, usize)],
    w: &LossWeights,
) -> Var {
    if pairs.is_empty() || p_old.ncols() == 0 {
        return zero(t);
    }
    let new_rows: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let old_rows: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let k_old = p_old.ncols();
    let pn = t.gather_rows(p_new, &new_rows);
    let pn = t.slice_cols(pn, 0, k_old);
    let po = t.constant(p_old.select(ndarray::Axis(0), &old_rows));
    let d = t.sub(pn, po);
    let sq = t.mul(d, d);
    let mse = t.mean(sq);
    let bn = t.gather_rows(boxes_new, &new_rows);
    let bo = t.constant(boxes_old.select(ndarray::Axis(0), &old_rows));
    let (l1, g) = box_sums(t, bn, bo, w);
    let bl = t.add(l1, g);
    let bl = t.scale(bl, 1.0 / pairs.len() as f64);
    t.add(mse, bl)
}

pub fn kd_output_loss(
    p_new: &Array2<f64>,
    boxes_new: &Array2<f64>,
    p_old: &Array2<f64>,
    boxes_old: &Array2<f64>,
    pairs: &[(usize, usize)],
    w: &LossWeights,
) -> f64 {
    let mut t = Tape::inference();
    let p = t.constant(p_new.clone());
    let b = t.constant(boxes_new.clone());
    let v = kd_output_graph(&mut t, p, b, p_old, boxes_old, pairs, w);
    t.scalar(v)
}

/// `G(f) = (1/N_old)·Σ_{masked rows} ‖f_new − f_old‖₁`; zero when `N_old = 0`.
pub fn masked_distill_graph(t: &mut Tape, f_new: Var, f_old: &Array2<f64>, rows: &[usize], n_old: usize) -> Var {
    if n_old == 0 || rows.is_empty() {
        return zero(t);
    }
    let fnew = t.gather_rows(f_new, rows);
    let fold = t.constant(f_old.select(ndarray::Axis(0), rows));
    let d = t.sub(fnew, fold);
    let d = t.abs(d);
    let s = t.sum(d);
    t.scale(s, 1.0 / n_old as f64)
}

pub fn masked_feature_distill(f_new: &Array2<f64>, f_old: &Array2<f64>, mask: &[bool], n_old: usize) -> Result<f64> {
    if f_new.dim() != f_old.dim() || mask.len() != f_new.nrows() {
        return Err(DcaError::Shape(format!(
            "features {:?} vs {:?} with mask of {}",
            f_new.dim(),
            f_old.dim(),
            mask.len()
        )));
    }
    let rows: Vec<usize> = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
    let mut t = Tape::inference();
    let v = t.constant(f_new.clone());
    let g = masked_distill_graph(&mut t, v, f_old, &rows, n_old);
    Ok(t.scalar(g))
}
