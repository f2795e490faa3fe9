//! Multi-phase incremental training.

mod config;
mod optim;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{Ablation, KdFlags, KdPairing, TrainConfig};
pub use optim::{clip_global_norm, AdamW};

use crate::datagen::{phase_view, BoxAnnotation, Corpus, DetectionSample, IncrementalProtocol, PhaseDataset};
use crate::detector::{save_checkpoint, Detector, ForwardOutput, Session};
use crate::error::{DcaError, Result};
use crate::eval::{evaluate, BBox, EvalReport};
use crate::losses::{
    consistency_graph, detection_loss_graph, hungarian_match, kd_output_graph, masked_distill_graph, match_cost,
    pseudo_labels_from_output, token_mask, total_loss, LossBreakdown, LossTerms, PseudoLabelSet, Target,
};
use crate::semantics::SemanticTable;

/// Evaluation-only copy of a model. Its forward pass records no graph and
/// allocates no gradient buffers.
#[derive(Debug, Clone)]
pub struct FrozenModel {
    model: Detector,
    q_se: Array2<f64>,
}

/// Bookkeeping of one frozen forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TapeStats {
    pub recording: bool,
    pub grad_buffers: usize,
}

pub fn snapshot_old(model: &Detector, table: &SemanticTable) -> Result<FrozenModel> {
    Ok(FrozenModel { model: model.clone(), q_se: model.semantic_rows(table)? })
}

impl FrozenModel {
    pub fn snapshot(&self) -> FrozenModel {
        self.clone()
    }

    pub fn model(&self) -> &Detector {
        &self.model
    }

    pub fn class_ids(&self) -> &[usize] {
        self.model.class_ids()
    }

    pub fn forward(&self, image: &Array2<f64>) -> Result<ForwardOutput> {
        Ok(self.forward_traced(image)?.0)
    }

    pub fn forward_traced(&self, image: &Array2<f64>) -> Result<(ForwardOutput, TapeStats)> {
        let mut s = Session::inference(self.model.params());
        let vars = self.model.forward_graph(&mut s, image, &self.q_se)?;
        let stats = TapeStats { recording: s.tape.is_recording(), grad_buffers: s.tape.grad_buffers_allocated() };
        Ok((ForwardOutput::from_vars(&s, &vars), stats))
    }
}

/// Old-model outputs for one training sample, computed once per phase.
#[derive(Debug, Clone)]
struct OldCache {
    out: ForwardOutput,
    pseudo: PseudoLabelSet,
}

/// Per-epoch mean losses of all phases, in training order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsLog {
    pub rows: Vec<(usize, usize, LossBreakdown)>,
}

impl MetricsLog {
    pub fn header() -> String {
        format!("phase,epoch,{}", LossBreakdown::COLUMNS.join(","))
    }

    pub fn to_csv(&self) -> String {
        let mut out = Self::header();
        out.push('\n');
        for (phase, epoch, b) in &self.rows {
            let cells: Vec<String> = b.values().iter().map(|v| format!("{v:e}")).collect();
            let _ = writeln!(out, "{phase},{epoch},{}", cells.join(","));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| DcaError::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseResult {
    pub phase: usize,
    pub checkpoint: Option<PathBuf>,
    pub losses: Vec<LossBreakdown>,
    /// Held-out evaluation over all classes seen so far.
    pub eval: Option<EvalReport>,
}

fn targets_for(annotations: &[BoxAnnotation], pseudo: Option<&PseudoLabelSet>, class_ids: &[usize]) -> Result<Vec<Target>> {
    let column = |c: usize| {
        class_ids
            .iter()
            .position(|&x| x == c)
            .ok_or_else(|| DcaError::Config(format!("class {c} has no classifier column")))
    };
    let mut targets = Vec::with_capacity(annotations.len());
    for a in annotations {
        targets.push(Target { bbox: a.bbox, column: column(a.class_id)?, pseudo: false });
    }
    if let Some(p) = pseudo {
        for (b, &c) in p.boxes.iter().zip(&p.class_ids) {
            targets.push(Target { bbox: *b, column: column(c)?, pseudo: true });
        }
    }
    Ok(targets)
}

fn kd_pairs(mode: KdPairing, pseudo: &PseudoLabelSet, new_boxes: &Array2<f64>, old_boxes: &Array2<f64>, cfg: &TrainConfig) -> Result<Vec<(usize, usize)>> {
    let mut old_q = pseudo.source_query.clone();
    old_q.sort_unstable();
    match mode {
        KdPairing::Index => Ok(old_q.iter().map(|&q| (q, q)).collect()),
        KdPairing::Hungarian => {
            // Box-only cost: a dummy single-column probability table with zeros.
            let targets: Vec<Target> = old_q
                .iter()
                .map(|&q| Target {
                    bbox: BBox::new(old_boxes[[q, 0]], old_boxes[[q, 1]], old_boxes[[q, 2]], old_boxes[[q, 3]]),
                    column: 0,
                    pseudo: true,
                })
                .collect();
            let zeros = Array2::zeros((new_boxes.nrows(), 1));
            let cost = match_cost(&zeros, new_boxes, &targets, &cfg.loss.weights);
            Ok(hungarian_match(&cost)?.pairs.into_iter().map(|(n, j)| (n, old_q[j])).collect())
        }
    }
}

/// Builds the loss graph of one sample, backpropagates and returns the
/// per-parameter gradients with the loss breakdown.
fn sample_step(
    model: &Detector,
    q_se: &Array2<f64>,
    sample: &DetectionSample,
    old: Option<&OldCache>,
    phase: usize,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, Vec<Option<Array2<f64>>>)> {
    let mut s = Session::new(model.params());
    let vars = model.forward_graph(&mut s, &sample.pixel_matrix(), q_se)?;
    let pseudo = old.map(|o| &o.pseudo).filter(|_| cfg.pseudo_labels);
    let targets = targets_for(&sample.annotations, pseudo, model.class_ids())?;
    let w = &cfg.loss.weights;

    let mut heads = vec![(vars.boxes, vars.p)];
    heads.extend(vars.aux.iter().copied());
    let mut det_vars = Vec::new();
    let mut main_assignment = None;
    for (boxes, p) in heads {
        let cost = match_cost(s.value(p), s.value(boxes), &targets, w);
        let assignment = hungarian_match(&cost)?;
        det_vars.push(detection_loss_graph(&mut s.tape, p, boxes, &targets, &assignment, &cfg.loss));
        main_assignment.get_or_insert(assignment);
    }
    let assignment = main_assignment.expect("main head");

    let mut parts = Vec::new();
    let mut terms = LossTerms::default();
    for d in &det_vars {
        terms.cls += s.tape.scalar(d.cls);
        terms.box_l1 += s.tape.scalar(d.l1);
        terms.box_giou += s.tape.scalar(d.giou);
        parts.extend([d.cls, d.l1, d.giou]);
    }
    if let Some(anchors) = vars.q_se_adapted {
        let (cons, _) = consistency_graph(&mut s.tape, anchors, &vars.e_se);
        terms.cons = s.tape.scalar(cons);
        parts.push(cons);
    }
    if let (Some(o), true) = (old, phase > 1) {
        let n_old = o.pseudo.len();
        if cfg.kd_out() {
            let pairs = kd_pairs(cfg.kd_pairing, &o.pseudo, s.value(vars.boxes), &o.out.boxes, cfg)?;
            let v = kd_output_graph(&mut s.tape, vars.p, vars.boxes, &o.out.p, &o.out.boxes, &pairs, w);
            terms.kd_out = s.tape.scalar(v);
            parts.push(v);
        }
        // Queries matched to pseudo targets select the instance-level rows.
        let query_rows: Vec<usize> =
            assignment.pairs.iter().filter(|&&(_, j)| targets[j].pseudo).map(|&(q, _)| q).collect();
        if cfg.kd_vis() {
            let tokens = token_mask(model.config().token_grid(), &o.pseudo.boxes);
            let gv = masked_distill_graph(&mut s.tape, vars.v_e, &o.out.v_e, &tokens, n_old);
            let gc = masked_distill_graph(&mut s.tape, vars.e_cls, &o.out.e_cls, &query_rows, n_old);
            let v = s.tape.add(gv, gc);
            terms.kd_vis = s.tape.scalar(v);
            parts.push(v);
        }
        if let (true, Some(new_proj), Some(old_proj)) = (cfg.kd_proj(), vars.e_proj, o.out.e_proj.as_ref()) {
            let v = masked_distill_graph(&mut s.tape, new_proj, old_proj, &query_rows, n_old);
            terms.kd_proj = s.tape.scalar(v);
            parts.push(v);
        }
    }
    let breakdown = total_loss(&terms, phase)?;
    let total = parts.into_iter().reduce(|a, b| s.tape.add(a, b)).expect("at least one term");
    let grads = s.tape.backward(total);
    let mut out = vec![None; model.params().len()];
    for (id, g) in s.param_grads(&grads) {
        out[id.0] = Some(g);
    }
    Ok((breakdown, out))
}

fn add_grads(acc: &mut [Option<Array2<f64>>], grads: Vec<Option<Array2<f64>>>) {
    for (a, g) in acc.iter_mut().zip(grads) {
        match (a.as_mut(), g) {
            (Some(a), Some(g)) => *a += &g,
            (None, Some(g)) => *a = Some(g),
            _ => {}
        }
    }
}

/// One optimization step on `samples`; returns the summed breakdown.
pub fn train_step(
    model: &mut Detector,
    opt: &mut AdamW,
    q_se: &Array2<f64>,
    samples: &[&DetectionSample],
    phase: usize,
    lr_factor: f64,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    train_step_inner(model, opt, q_se, &samples.iter().map(|s| (*s, None)).collect::<Vec<_>>(), phase, lr_factor, cfg)
}

fn train_step_inner(
    model: &mut Detector,
    opt: &mut AdamW,
    q_se: &Array2<f64>,
    batch: &[(&DetectionSample, Option<&OldCache>)],
    phase: usize,
    lr_factor: f64,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let mut acc: Vec<Option<Array2<f64>>> = vec![None; model.params().len()];
    let mut sum = LossBreakdown::default();
    for &(sample, old) in batch {
        let (b, g) = sample_step(model, q_se, sample, old, phase, cfg)?;
        sum.accumulate(&b);
        add_grads(&mut acc, g);
    }
    let inv = 1.0 / batch.len() as f64;
    for g in acc.iter_mut().flatten() {
        g.mapv_inplace(|x| x * inv);
    }
    let norm = clip_global_norm(&mut acc, cfg.clip_norm);
    if !norm.is_finite() {
        return Err(DcaError::Numeric(format!("gradient norm is {norm} in phase {phase}")));
    }
    opt.step(model.params_mut(), &acc, lr_factor);
    Ok(sum)
}

/// Loss breakdown of one sample without updating anything.
pub fn sample_loss(
    model: &Detector,
    table: &SemanticTable,
    sample: &DetectionSample,
    old: Option<&FrozenModel>,
    phase: usize,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let q_se = model.semantic_rows(table)?;
    let cache = old.map(|o| old_cache(o, sample, cfg)).transpose()?;
    Ok(sample_step(model, &q_se, sample, cache.as_ref(), phase, cfg)?.0)
}

/// Loss breakdown of one sample plus the gradient of its total loss with
/// respect to every parameter (indexed like the parameter store).
pub fn sample_gradients(
    model: &Detector,
    table: &SemanticTable,
    sample: &DetectionSample,
    old: Option<&FrozenModel>,
    phase: usize,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, Vec<Option<Array2<f64>>>)> {
    let q_se = model.semantic_rows(table)?;
    let cache = old.map(|o| old_cache(o, sample, cfg)).transpose()?;
    sample_step(model, &q_se, sample, cache.as_ref(), phase, cfg)
}

fn old_cache(old: &FrozenModel, sample: &DetectionSample, cfg: &TrainConfig) -> Result<OldCache> {
    let out = old.forward(&sample.pixel_matrix())?;
    let gt: Vec<BBox> = sample.annotations.iter().map(|a| a.bbox).collect();
    let pseudo = pseudo_labels_from_output(&out.boxes, &out.p, old.class_ids(), &gt, &cfg.pseudo);
    Ok(OldCache { out, pseudo })
}

/// Trains `model` on one phase. `old` is the frozen previous-phase model.
/// Returns the per-epoch mean breakdowns.
pub fn train_phase(
    model: &mut Detector,
    data: &PhaseDataset,
    old: Option<&FrozenModel>,
    table: &SemanticTable,
    cfg: &TrainConfig,
) -> Result<Vec<LossBreakdown>> {
    cfg.validate()?;
    let phase = data.phase_index;
    if let Some(missing) = data.visible_classes.iter().find(|&&c| table.vector(c).is_none()) {
        return Err(DcaError::Coverage(format!("class id {missing}")));
    }
    if data.samples.is_empty() {
        return Err(DcaError::Protocol(format!("phase {phase} has no training samples")));
    }
    let q_se = model.semantic_rows(table)?;
    let old = old.filter(|_| phase > 1 && cfg.needs_old_model());
    let caches: Vec<Option<OldCache>> = match old {
        Some(o) => data.samples.iter().map(|s| old_cache(o, s, cfg).map(Some)).collect::<Result<_>>()?,
        None => vec![None; data.samples.len()],
    };
    let mut opt = AdamW::new(model.params(), cfg.lr, cfg.backbone_lr_mult, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (phase as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..data.samples.len()).collect();
    let mut history = Vec::new();
    for epoch in 0..cfg.epochs_for(phase) {
        order.shuffle(&mut rng);
        let lr_factor = match cfg.lr_drop_epoch {
            Some(e) if epoch >= e => 0.1,
            _ => 1.0,
        };
        let mut sum = LossBreakdown::default();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| (&data.samples[i], caches[i].as_ref())).collect();
            sum.accumulate(&train_step_inner(model, &mut opt, &q_se, &batch, phase, lr_factor, cfg)?);
        }
        let mean = sum.scaled(1.0 / data.samples.len() as f64);
        info!("phase {phase} epoch {epoch}: l_total {:.4} (det {:.4}, cons {:.4}, hkd {:.4})", mean.l_total, mean.l_det, mean.l_cons, mean.l_hkd());
        history.push(mean);
    }
    Ok(history)
}

/// Copies `prev` and appends classifier columns for `new_classes`.
pub fn expand_for_phase(prev: &Detector, new_classes: &[usize], seed: u64, phase: usize) -> Result<Detector> {
    let mut model = prev.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000 + phase as u64));
    model.expand_classes(new_classes, &mut rng)?;
    Ok(model)
}

/// Everything produced by [`run_protocol`].
#[derive(Debug, Clone)]
pub struct ProtocolRun {
    pub phases: Vec<PhaseResult>,
    pub models: Vec<Detector>,
    pub log: MetricsLog,
    pub upper_bound: Option<EvalReport>,
}

/// Where [`run_protocol`] writes checkpoints and the metrics log.
#[derive(Debug, Clone)]
pub struct RunOutputs {
    pub dir: PathBuf,
}

impl RunOutputs {
    pub fn checkpoint(&self, phase: usize) -> PathBuf {
        self.dir.join(format!("phase_{phase}.ckpt"))
    }

    pub fn upper_bound_checkpoint(&self) -> PathBuf {
        self.dir.join("upper_bound.ckpt")
    }

    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }
}

/// Trains every phase in order and evaluates each on `held_out` over the
/// classes seen so far. With `with_upper_bound`, a jointly trained model on
/// all classes supplies the gap metrics of the final phase.
pub fn run_protocol(
    corpus: &Corpus,
    held_out: &[DetectionSample],
    protocol: &IncrementalProtocol,
    table: &SemanticTable,
    cfg: &TrainConfig,
    outputs: Option<&RunOutputs>,
    with_upper_bound: bool,
) -> Result<ProtocolRun> {
    cfg.validate()?;
    protocol.validate()?;
    table.check_covers(&corpus.taxonomy)?;
    let mut run = ProtocolRun { phases: Vec::new(), models: Vec::new(), log: MetricsLog::default(), upper_bound: None };
    let mut frozen: Option<FrozenModel> = None;
    for t in 1..=protocol.num_phases() {
        let data = phase_view(corpus, protocol, t)?;
        let mut model = match run.models.last() {
            None => Detector::new(cfg.effective_model(), data.phase_classes.clone(), cfg.seed)?,
            Some(prev) => expand_for_phase(prev, &data.phase_classes, cfg.seed, t)?,
        };
        let losses = train_phase(&mut model, &data, frozen.as_ref(), table, cfg);
        let losses = match losses {
            Ok(l) => l,
            Err(e) => {
                if let Some(o) = outputs {
                    run.log.save(&o.metrics())?;
                }
                return Err(e);
            }
        };
        for (epoch, b) in losses.iter().enumerate() {
            run.log.rows.push((t, epoch, *b));
        }
        let old_classes = if t > 1 { protocol.visible_classes(t - 1)? } else { Vec::new() };
        let report = evaluate(&model, table, held_out, &old_classes, &cfg.eval)?;
        info!("phase {t}: mAP50 {:.4}, mAP {:.4}", report.map50, report.map_coco);
        let checkpoint = match outputs {
            Some(o) => {
                std::fs::create_dir_all(&o.dir).map_err(|e| DcaError::io(&o.dir, e))?;
                save_checkpoint(&model, t, &o.checkpoint(t))?;
                run.log.save(&o.metrics())?;
                Some(o.checkpoint(t))
            }
            None => None,
        };
        run.phases.push(PhaseResult { phase: t, checkpoint, losses, eval: Some(report) });
        if cfg.needs_old_model() {
            frozen = Some(snapshot_old(&model, table)?);
        }
        run.models.push(model);
    }
    if with_upper_bound {
        let (upper_model, upper) = train_upper_bound(corpus, held_out, protocol, table, cfg)?;
        if let Some(o) = outputs {
            save_checkpoint(&upper_model, 1, &o.upper_bound_checkpoint())?;
        }
        // Gaps are undefined against an upper bound that detects nothing.
        match run.phases.last_mut() {
            Some(last) if upper.map50 > 0.0 => {
                last.eval = last.eval.take().map(|r| r.with_upper_bound(&upper)).transpose()?;
            }
            _ => warn!("upper-bound mAP50 is {}; gap metrics left empty", upper.map50),
        }
        run.upper_bound = Some(upper);
    }
    Ok(run)
}

/// Joint training on all classes of the protocol in a single phase.
pub fn train_upper_bound(
    corpus: &Corpus,
    held_out: &[DetectionSample],
    protocol: &IncrementalProtocol,
    table: &SemanticTable,
    cfg: &TrainConfig,
) -> Result<(Detector, EvalReport)> {
    let all: Vec<usize> = protocol.phases.iter().flatten().copied().collect();
    let joint = IncrementalProtocol::from_phases(corpus.taxonomy.clone(), vec![all.clone()])?;
    let data = phase_view(corpus, &joint, 1)?;
    let mut model = Detector::new(cfg.effective_model(), all, cfg.seed)?;
    train_phase(&mut model, &data, None, table, cfg)?;
    let report = evaluate(&model, table, held_out, &[], &cfg.eval)?;
    Ok((model, report))
}
