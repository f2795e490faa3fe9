use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::ModelConfig;
use crate::error::{DcaError, Result};
use crate::eval::EvalOptions;
use crate::losses::{LossConfig, PseudoLabelConfig};

/// The four method components; all off gives fine-tuning (with pseudo labels
/// unless those are disabled separately).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// Decoupled localization and recognition decoding.
    pub dlr: bool,
    /// Semantic vectors as recognition-decoder queries, with the consistency loss.
    pub srd: bool,
    /// Duplex classifier fusion.
    pub dcf: bool,
    /// Hybrid knowledge distillation.
    pub hkd: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self::all(true)
    }
}

impl Ablation {
    pub fn all(on: bool) -> Self {
        Self { dlr: on, srd: on, dcf: on, hkd: on }
    }

    /// Applies `NAME=on|off` (case-insensitive name).
    pub fn set(&mut self, spec: &str) -> Result<()> {
        let (name, value) = spec
            .split_once('=')
            .ok_or_else(|| DcaError::Config(format!("ablation {spec:?} is not NAME=on|off")))?;
        let on = match value.to_ascii_lowercase().as_str() {
            "on" | "true" | "1" => true,
            "off" | "false" | "0" => false,
            other => return Err(DcaError::Config(format!("ablation value {other:?} is not on/off"))),
        };
        match name.to_ascii_uppercase().as_str() {
            "DLR" => self.dlr = on,
            "SRD" => self.srd = on,
            "DCF" => self.dcf = on,
            "HKD" => self.hkd = on,
            other => return Err(DcaError::Config(format!("unknown ablation component {other:?}"))),
        }
        Ok(())
    }
}

/// Individual distillation terms; only effective when `Ablation::hkd` is on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct KdFlags {
    pub out: bool,
    pub vis: bool,
    pub proj: bool,
}

impl Default for KdFlags {
    fn default() -> Self {
        Self { out: true, vis: true, proj: true }
    }
}

/// How new-model queries are paired with old-model queries for output
/// distillation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KdPairing {
    /// Same query index in both models.
    #[default]
    Index,
    /// Minimum-cost box matching between the two models' predictions.
    Hungarian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    /// Epochs of phases after the first.
    pub epochs: usize,
    /// Epochs of the first phase; `epochs` when unset.
    pub base_epochs: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub backbone_lr_mult: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub clip_norm: f64,
    /// Epoch after which the learning rate drops tenfold.
    pub lr_drop_epoch: Option<usize>,
    pub seed: u64,
    pub ablation: Ablation,
    pub kd: KdFlags,
    pub kd_pairing: KdPairing,
    /// Old-model detections as extra targets in later phases.
    pub pseudo_labels: bool,
    pub pseudo: PseudoLabelConfig,
    pub loss: LossConfig,
    pub eval: EvalOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            epochs: 10,
            base_epochs: None,
            batch_size: 4,
            lr: 2e-4,
            backbone_lr_mult: 0.1,
            weight_decay: 1e-4,
            clip_norm: 0.1,
            lr_drop_epoch: None,
            seed: 0,
            ablation: Ablation::default(),
            kd: KdFlags::default(),
            kd_pairing: KdPairing::default(),
            pseudo_labels: true,
            pseudo: PseudoLabelConfig::default(),
            loss: LossConfig::default(),
            eval: EvalOptions::default(),
        }
    }
}

impl TrainConfig {
    /// Model configuration with the structural ablation switches applied.
    pub fn effective_model(&self) -> ModelConfig {
        ModelConfig {
            decoupled: self.ablation.dlr,
            semantic_queries: self.ablation.srd,
            duplex: self.ablation.dcf,
            ..self.model.clone()
        }
    }

    pub fn epochs_for(&self, phase: usize) -> usize {
        if phase <= 1 {
            self.base_epochs.unwrap_or(self.epochs)
        } else {
            self.epochs
        }
    }

    pub fn kd_out(&self) -> bool {
        self.ablation.hkd && self.kd.out
    }

    pub fn kd_vis(&self) -> bool {
        self.ablation.hkd && self.kd.vis
    }

    pub fn kd_proj(&self) -> bool {
        self.ablation.hkd && self.kd.proj
    }

    /// Whether later phases need a frozen copy of the previous model.
    pub fn needs_old_model(&self) -> bool {
        self.pseudo_labels || self.kd_out() || self.kd_vis() || self.kd_proj()
    }

    pub fn validate(&self) -> Result<()> {
        self.effective_model().validate()?;
        let positive = [("lr", self.lr), ("backbone_lr_mult", self.backbone_lr_mult)];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return Err(DcaError::Config(format!("{name} must be positive, got {v}")));
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(DcaError::Config("weight_decay must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(DcaError::Config("batch_size must be at least 1".into()));
        }
        if !(self.pseudo.threshold > 0.0 && self.pseudo.threshold < 1.0) {
            return Err(DcaError::Config(format!("pseudo-label threshold {} outside (0, 1)", self.pseudo.threshold)));
        }
        if self.eval.top_k == 0 {
            return Err(DcaError::Config("top_k must be at least 1".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DcaError::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| DcaError::io(path, e))
    }
}
