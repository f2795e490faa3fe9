//! Matching, detection, consistency and distillation losses.

mod matching;
mod pseudo;
mod terms;

use serde::{Deserialize, Serialize};

use crate::error::{DcaError, Result};

pub use matching::{hungarian_match, match_cost, LossWeights, MatchAssignment, Target};
pub use pseudo::{pseudo_label, pseudo_labels_from_output, token_mask, PseudoLabelConfig, PseudoLabelSet};
pub use terms::{
    consistency_graph, consistency_loss, detection_loss, detection_loss_graph, giou_graph, kd_output_graph,
    kd_output_loss, masked_distill_graph, masked_feature_distill, DetectionLoss, DetectionTerms, FocalParams,
    LossConfig, ZERO_NORM,
};

/// Raw term values of one step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub cls: f64,
    pub box_l1: f64,
    pub box_giou: f64,
    pub cons: f64,
    pub kd_out: f64,
    pub kd_vis: f64,
    pub kd_proj: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_det: f64,
    pub l_cls: f64,
    pub l_box_l1: f64,
    pub l_box_giou: f64,
    pub l_cons: f64,
    pub l_kd_out: f64,
    pub l_kd_vis: f64,
    pub l_kd_proj: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    pub const COLUMNS: [&'static str; 9] =
        ["l_det", "l_cls", "l_box_l1", "l_box_giou", "l_cons", "l_kd_out", "l_kd_vis", "l_kd_proj", "l_total"];

    pub fn values(&self) -> [f64; 9] {
        [
            self.l_det,
            self.l_cls,
            self.l_box_l1,
            self.l_box_giou,
            self.l_cons,
            self.l_kd_out,
            self.l_kd_vis,
            self.l_kd_proj,
            self.l_total,
        ]
    }

    pub fn l_hkd(&self) -> f64 {
        self.l_kd_out + self.l_kd_vis + self.l_kd_proj
    }

    /// Running sum, used to average over an epoch.
    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.l_det += other.l_det;
        self.l_cls += other.l_cls;
        self.l_box_l1 += other.l_box_l1;
        self.l_box_giou += other.l_box_giou;
        self.l_cons += other.l_cons;
        self.l_kd_out += other.l_kd_out;
        self.l_kd_vis += other.l_kd_vis;
        self.l_kd_proj += other.l_kd_proj;
        self.l_total += other.l_total;
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            l_det: self.l_det * c,
            l_cls: self.l_cls * c,
            l_box_l1: self.l_box_l1 * c,
            l_box_giou: self.l_box_giou * c,
            l_cons: self.l_cons * c,
            l_kd_out: self.l_kd_out * c,
            l_kd_vis: self.l_kd_vis * c,
            l_kd_proj: self.l_kd_proj * c,
            l_total: self.l_total * c,
        }
    }
}

/// Assembles `l_det + l_cons + l_hkd`; distillation is forced to zero in the
/// first phase.
pub fn total_loss(terms: &LossTerms, phase: usize) -> Result<LossBreakdown> {
    let named = [
        ("l_cls", terms.cls),
        ("l_box_l1", terms.box_l1),
        ("l_box_giou", terms.box_giou),
        ("l_cons", terms.cons),
        ("l_kd_out", terms.kd_out),
        ("l_kd_vis", terms.kd_vis),
        ("l_kd_proj", terms.kd_proj),
    ];
    if let Some((name, v)) = named.iter().find(|(_, v)| !v.is_finite()) {
        return Err(DcaError::Numeric(format!("{name} is {v}")));
    }
    let kd = |v: f64| if phase <= 1 { 0.0 } else { v };
    let l_det = terms.cls + terms.box_l1 + terms.box_giou;
    let (l_kd_out, l_kd_vis, l_kd_proj) = (kd(terms.kd_out), kd(terms.kd_vis), kd(terms.kd_proj));
    Ok(LossBreakdown {
        l_det,
        l_cls: terms.cls,
        l_box_l1: terms.box_l1,
        l_box_giou: terms.box_giou,
        l_cons: terms.cons,
        l_kd_out,
        l_kd_vis,
        l_kd_proj,
        l_total: l_det + terms.cons + (l_kd_out + l_kd_vis + l_kd_proj),
    })
}
