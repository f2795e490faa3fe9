use dca_core::datagen::{build_protocol, generate_corpus, phase_view, Corpus, CorpusSpec, IncrementalProtocol};
use dca_core::detector::{load_checkpoint, Detector, ModelConfig};
use dca_core::error::DcaError;
use dca_core::losses::LossBreakdown;
use dca_core::semantics::{synth_embeddings, SemanticTable};
use dca_core::trainer::*;

fn tiny_config() -> TrainConfig {
    TrainConfig {
        model: ModelConfig {
            image_size: 32,
            stem_channels: [4, 8],
            d_model: 16,
            n_heads: 2,
            ffn_dim: 16,
            encoder_layers: 1,
            decoder_layers: 2,
            num_queries: 6,
            d_se: 8,
            ..ModelConfig::default()
        },
        epochs: 1,
        batch_size: 2,
        lr: 1e-3,
        clip_norm: 1.0,
        ..TrainConfig::default()
    }
}

fn fixture(n: usize) -> (Corpus, Corpus, SemanticTable) {
    let spec = CorpusSpec { n_samples: n, image_size: 32, max_objects: 3, max_object_px: 12, min_object_px: 6, seed: 3, ..CorpusSpec::default() };
    let corpus = generate_corpus(&spec).unwrap();
    let held = generate_corpus(&CorpusSpec { n_samples: 6, seed: 4, ..spec }).unwrap();
    let table = synth_embeddings(&corpus.taxonomy, 8, 0).unwrap();
    (corpus, held, table)
}

fn kd_terms(b: &LossBreakdown) -> [f64; 3] {
    [b.l_kd_out, b.l_kd_vis, b.l_kd_proj]
}

/// Phase-1 model plus the frozen copy and expanded phase-2 model, with a
/// pseudo-label threshold low enough that an untrained old model emits labels.
fn phase_two_setup(cfg: &TrainConfig) -> (Corpus, SemanticTable, IncrementalProtocol, FrozenModel, Detector) {
    let (corpus, _, table) = fixture(6);
    let protocol = build_protocol(&corpus.taxonomy, &[10, 10]).unwrap();
    let base = Detector::new(cfg.effective_model(), protocol.phases[0].clone(), 1).unwrap();
    let old = snapshot_old(&base, &table).unwrap();
    let new = expand_for_phase(&base, &protocol.phases[1], 1, 2).unwrap();
    (corpus, table, protocol, old, new)
}

fn low_threshold() -> TrainConfig {
    let mut cfg = tiny_config();
    cfg.pseudo.threshold = 0.01;
    cfg
}

#[test]
fn phase_one_logs_no_distillation() {
    let (corpus, _, table) = fixture(8);
    let protocol = build_protocol(&corpus.taxonomy, &[10, 10]).unwrap();
    let data = phase_view(&corpus, &protocol, 1).unwrap();
    let cfg = TrainConfig { epochs: 2, ..low_threshold() };
    let mut model = Detector::new(cfg.effective_model(), data.phase_classes.clone(), 0).unwrap();
    // An old model handed to phase 1 is ignored.
    let old = snapshot_old(&model, &table).unwrap();
    let history = train_phase(&mut model, &data, Some(&old), &table, &cfg).unwrap();
    assert_eq!(history.len(), 2);
    for b in &history {
        assert_eq!(kd_terms(b), [0.0; 3]);
        assert!(b.l_total.is_finite() && b.l_det > 0.0);
    }
}

#[test]
fn identical_runs_write_identical_metrics() {
    let (corpus, held, table) = fixture(6);
    let protocol = build_protocol(&corpus.taxonomy, &[10, 10]).unwrap();
    let cfg = tiny_config();
    let mut files = Vec::new();
    let mut reports = Vec::new();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for dir in &dirs {
        let out = RunOutputs { dir: dir.path().to_path_buf() };
        let run = run_protocol(&corpus, &held.samples, &protocol, &table, &cfg, Some(&out), false).unwrap();
        files.push(std::fs::read(out.metrics()).unwrap());
        reports.push(run.phases.iter().map(|p| p.eval.clone()).collect::<Vec<_>>());
    }
    assert_eq!(files[0], files[1]);
    assert_eq!(reports[0], reports[1]);
    let text = String::from_utf8(files[0].clone()).unwrap();
    assert_eq!(text.lines().next().unwrap(), "phase,epoch,l_det,l_cls,l_box_l1,l_box_giou,l_cons,l_kd_out,l_kd_vis,l_kd_proj,l_total");
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn single_step_descends_on_its_batch() {
    let (corpus, _, table) = fixture(50);
    let protocol = build_protocol(&corpus.taxonomy, &[20]).unwrap();
    let data = phase_view(&corpus, &protocol, 1).unwrap();
    let cfg = TrainConfig { lr: 1e-4, clip_norm: 0.0, ..tiny_config() };
    let mut decreased = 0;
    for trial in 0..50u64 {
        let mut model = Detector::new(cfg.effective_model(), data.phase_classes.clone(), trial).unwrap();
        let sample = &data.samples[trial as usize];
        let before = sample_loss(&model, &table, sample, None, 1, &cfg).unwrap().l_total;
        let q_se = model.semantic_rows(&table).unwrap();
        let mut opt = AdamW::new(model.params(), cfg.lr, 1.0, 0.0);
        train_step(&mut model, &mut opt, &q_se, &[sample], 1, 1.0, &cfg).unwrap();
        let after = sample_loss(&model, &table, sample, None, 1, &cfg).unwrap().l_total;
        decreased += (after < before) as usize;
    }
    assert!(decreased >= 45, "loss decreased in {decreased}/50 trials");
}

#[test]
fn frozen_handle_contracts() {
    let (corpus, _, table) = fixture(4);
    let protocol = build_protocol(&corpus.taxonomy, &[10, 10]).unwrap();
    let data = phase_view(&corpus, &protocol, 1).unwrap();
    let cfg = TrainConfig { epochs: 10, ..tiny_config() };
    let mut model = Detector::new(cfg.effective_model(), data.phase_classes.clone(), 0).unwrap();
    let old = snapshot_old(&model, &table).unwrap();
    let image = corpus.samples[0].pixel_matrix();
    let (before, stats) = old.forward_traced(&image).unwrap();
    assert_eq!(stats, TapeStats { recording: false, grad_buffers: 0 });
    assert_eq!(old.snapshot().forward(&image).unwrap(), before);
    assert_eq!(before, model.forward(&image, &table).unwrap());

    train_phase(&mut model, &data, None, &table, &cfg).unwrap();
    assert_eq!(old.forward(&image).unwrap(), before);
    assert_ne!(model.forward(&image, &table).unwrap().p, before.p);
}

#[test]
fn kd_flags_zero_exactly_their_term() {
    let cfg = low_threshold();
    let (corpus, table, _, old, new) = phase_two_setup(&cfg);
    let sample = corpus.samples.iter().find(|s| !s.annotations.is_empty()).unwrap();
    let full = sample_loss(&new, &table, sample, Some(&old), 2, &cfg).unwrap();
    assert!(kd_terms(&full).iter().all(|&v| v > 0.0), "{full:?}");
    for k in 0..3 {
        let mut off = cfg.clone();
        match k {
            0 => off.kd.out = false,
            1 => off.kd.vis = false,
            _ => off.kd.proj = false,
        }
        let b = sample_loss(&new, &table, sample, Some(&old), 2, &off).unwrap();
        let (want, got) = (kd_terms(&full), kd_terms(&b));
        for j in 0..3 {
            assert_eq!(got[j], if j == k { 0.0 } else { want[j] }, "flag {k}, term {j}");
        }
        assert_eq!((b.l_det, b.l_cons), (full.l_det, full.l_cons));
    }
    let mut no_hkd = cfg.clone();
    no_hkd.ablation.hkd = false;
    assert_eq!(kd_terms(&sample_loss(&new, &table, sample, Some(&old), 2, &no_hkd).unwrap()), [0.0; 3]);
}

#[test]
fn disabled_flag_is_zero_in_every_logged_epoch() {
    let mut cfg = TrainConfig { epochs: 2, ..low_threshold() };
    cfg.kd.vis = false;
    let (corpus, table, protocol, old, mut new) = phase_two_setup(&cfg);
    let data = phase_view(&corpus, &protocol, 2).unwrap();
    let history = train_phase(&mut new, &data, Some(&old), &table, &cfg).unwrap();
    assert!(history.iter().all(|b| b.l_kd_vis == 0.0 && b.l_kd_out > 0.0));
}

#[test]
fn all_components_off_is_fine_tuning_with_pseudo_labels() {
    let mut cfg = low_threshold();
    cfg.ablation = Ablation::all(false);
    let m = cfg.effective_model();
    assert!(!m.decoupled && !m.semantic_queries && !m.duplex);
    assert!(cfg.needs_old_model());
    let (corpus, table, _, old, new) = phase_two_setup(&cfg);
    let sample = &corpus.samples[0];
    let with = sample_loss(&new, &table, sample, Some(&old), 2, &cfg).unwrap();
    assert_eq!(kd_terms(&with), [0.0; 3]);
    assert_eq!(with.l_cons, 0.0);
    // Pseudo labels enter the detection loss.
    let without = sample_loss(&new, &table, sample, None, 2, &cfg).unwrap();
    assert_ne!(with.l_det, without.l_det);
    let naive = TrainConfig { pseudo_labels: false, ..cfg };
    assert!(!naive.needs_old_model());
    assert_eq!(sample_loss(&new, &table, sample, Some(&old), 2, &naive).unwrap(), without);
}

#[test]
fn expansion_preserves_old_logits() {
    for srd in [true, false] {
        let mut cfg = tiny_config();
        cfg.ablation.srd = srd;
        let (corpus, table, protocol, _, _) = phase_two_setup(&cfg);
        let base = Detector::new(cfg.effective_model(), protocol.phases[0].clone(), 5).unwrap();
        let grown = expand_for_phase(&base, &protocol.phases[1], 5, 2).unwrap();
        assert_eq!(grown.class_ids().len(), 20);
        let q_se = grown.semantic_rows(&table).unwrap();
        for sample in &corpus.samples[..3] {
            let image = sample.pixel_matrix();
            let a = base.forward(&image, &table).unwrap();
            // Head level with the class embeddings held fixed.
            let head = grown.duplex_fusion(&a.e_cls, &q_se, 1.0).unwrap();
            assert_eq!(head.h.slice(ndarray::s![.., ..10]), a.h);
            // New semantic queries join decoder self-attention, so only the
            // configuration without them is compared end to end.
            if !srd {
                let b = grown.forward(&image, &table).unwrap();
                assert_eq!(b.h.slice(ndarray::s![.., ..10]), a.h);
                assert_eq!(b.boxes, a.boxes);
            }
        }
    }
}

#[test]
fn protocol_shapes() {
    let (corpus, held, table) = fixture(24);
    let cfg = tiny_config();
    let split = build_protocol(&corpus.taxonomy, &[15, 5]).unwrap();
    let run = run_protocol(&corpus, &held.samples, &split, &table, &cfg, None, false).unwrap();
    assert_eq!(run.phases.len(), 2);
    assert_eq!(run.models[1].class_ids(), (0..20).collect::<Vec<_>>());
    let last = run.phases[1].eval.as_ref().unwrap();
    let evaluated: Vec<usize> = last.per_class_ap50.keys().chain(&last.classes_without_gt).copied().collect();
    let mut evaluated = evaluated;
    evaluated.sort_unstable();
    assert_eq!(evaluated, (0..20).collect::<Vec<_>>());
    assert_eq!(run.phases[1].losses.len(), cfg.epochs);

    let joint = build_protocol(&corpus.taxonomy, &[20]).unwrap();
    let run = run_protocol(&corpus, &held.samples, &joint, &table, &cfg, None, false).unwrap();
    assert_eq!(run.phases.len(), 1);
    let (_, upper) = train_upper_bound(&corpus, &held.samples, &joint, &table, &cfg).unwrap();
    assert_eq!(run.phases[0].eval.as_ref().unwrap(), &upper);
}

#[test]
fn upper_bound_fills_gap_metrics_and_checkpoints_round_trip() {
    let (corpus, held, table) = fixture(6);
    let protocol = build_protocol(&corpus.taxonomy, &[10, 10]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = RunOutputs { dir: dir.path().to_path_buf() };
    let run = run_protocol(&corpus, &held.samples, &protocol, &table, &tiny_config(), Some(&out), true).unwrap();
    let upper = run.upper_bound.as_ref().unwrap();
    let last = run.phases[1].eval.as_ref().unwrap();
    if upper.map50 > 0.0 {
        assert!((last.abs_gap.unwrap() - (upper.map50 - last.map50)).abs() < 1e-12);
    }
    assert!(run.phases[0].eval.as_ref().unwrap().abs_gap.is_none());
    assert!(out.upper_bound_checkpoint().exists());
    for (t, model) in run.models.iter().enumerate() {
        let ck = load_checkpoint(&out.checkpoint(t + 1)).unwrap();
        assert_eq!(ck.phase, t + 1);
        let image = held.samples[0].pixel_matrix();
        let a = model.forward(&image, &table).unwrap().p;
        let b = ck.model.forward(&image, &table).unwrap().p;
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 1e-6));
    }
}

#[test]
fn errors_surface() {
    let (corpus, _, table) = fixture(4);
    let protocol = build_protocol(&corpus.taxonomy, &[10, 10]).unwrap();
    let data = phase_view(&corpus, &protocol, 1).unwrap();
    let cfg = tiny_config();

    let partial = synth_embeddings(&corpus.taxonomy[..5], 8, 0).unwrap();
    let mut model = Detector::new(cfg.effective_model(), data.phase_classes.clone(), 0).unwrap();
    assert!(matches!(train_phase(&mut model, &data, None, &partial, &cfg), Err(DcaError::Coverage(_))));

    let id = model.params().id("cls_head.bias").unwrap();
    model.params_mut().get_mut(id).value.fill(f64::NAN);
    let err = train_phase(&mut model, &data, None, &table, &cfg).unwrap_err();
    assert!(err.is_numeric(), "{err}");

    assert!(TrainConfig { lr: 0.0, ..cfg.clone() }.validate().is_err());
    assert!(TrainConfig { batch_size: 0, ..cfg.clone() }.validate().is_err());
}

#[test]
fn config_round_trip_and_ablation_parsing() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    let mut cfg = tiny_config();
    cfg.ablation.set("dlr=off").unwrap();
    cfg.ablation.set("HKD=0").unwrap();
    assert_eq!(cfg.ablation, Ablation { dlr: false, srd: true, dcf: true, hkd: false });
    assert!(cfg.ablation.set("XYZ=on").is_err());
    assert!(cfg.ablation.set("dlr").is_err());
    cfg.save(&path).unwrap();
    assert_eq!(TrainConfig::load(&path).unwrap(), cfg);
    std::fs::write(&path, r#"{"epochs": 3}"#).unwrap();
    let partial = TrainConfig::load(&path).unwrap();
    assert_eq!(partial.epochs, 3);
    assert_eq!(partial.lr, TrainConfig::default().lr);
}
