use std::path::{Path, PathBuf};
use std::str::FromStr;

use dca_core::datagen::{build_protocol, generate_corpus, Corpus, CorpusSpec, IncrementalProtocol};
use dca_core::detector::{load_checkpoint, Detector};
use dca_core::eval::{
    collect_predictions, evaluate, export_features, feature_csv, forgetting_csv, forgetting_report, report_from_scores,
    EvalReport,
};
use dca_core::semantics::{load_embedding_table, synth_embeddings, SemanticTable, SourceSpec};
use dca_core::trainer::{run_protocol, RunOutputs, TrainConfig};
use dca_core::DcaError;
use log::info;
use serde_json::json;

use crate::run::{RunDir, RunManifest};
use crate::{AnalyzeArgs, CliError, EmbedArgs, EvalArgs, GenDataArgs, SweepArgs, TrainArgs};

type CliResult<T> = std::result::Result<T, CliError>;

/// The held-out corpus uses the training seed shifted by this amount.
const HELD_OUT_SEED_OFFSET: u64 = 1_000_003;

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| DcaError::io(path, e).into())
}

fn absolute(path: &Path) -> CliResult<PathBuf> {
    std::fs::canonicalize(path).map_err(|e| DcaError::io(path, e).into())
}

fn to_json<T: serde::Serialize>(v: &T) -> CliResult<serde_json::Value> {
    serde_json::to_value(v).map_err(|e| DcaError::from(e).into())
}

fn parse_grid(s: &str) -> CliResult<(usize, usize)> {
    let bad = || CliError::Usage(format!("--classes {s:?} is not SHAPESxCOLORS"));
    let (a, b) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

/// Layout of a `gen-data` run directory.
struct DataDir {
    corpus: PathBuf,
    held_out: PathBuf,
    protocol: PathBuf,
}

impl DataDir {
    fn new(dir: &Path) -> Self {
        Self { corpus: dir.join("corpus"), held_out: dir.join("held_out"), protocol: dir.join("protocol.json") }
    }
}

/// Taxonomy from a corpus directory without decoding its images.
fn read_taxonomy(corpus_dir: &Path) -> CliResult<Vec<String>> {
    let path = corpus_dir.join("annotations.json");
    let text = std::fs::read_to_string(&path).map_err(|e| DcaError::io(&path, e))?;
    let doc: serde_json::Value = serde_json::from_str(&text).map_err(DcaError::from)?;
    serde_json::from_value(doc["taxonomy"].clone())
        .map_err(|_| DcaError::Format(format!("{} has no taxonomy list", path.display())).into())
}

pub fn gen_data(root: &Path, a: &GenDataArgs) -> CliResult<PathBuf> {
    let (n_shapes, n_colors) = parse_grid(&a.classes)?;
    let mut spec = CorpusSpec {
        n_samples: a.images,
        image_size: a.image_size,
        n_shapes,
        n_colors,
        max_objects: a.max_objects,
        seed: a.seed,
        ..CorpusSpec::default()
    };
    spec.min_object_px = a.min_object_px.unwrap_or(spec.min_object_px);
    spec.max_object_px = a.max_object_px.unwrap_or(spec.max_object_px);
    let held_spec = CorpusSpec { n_samples: a.held_out, seed: a.seed.wrapping_add(HELD_OUT_SEED_OFFSET), ..spec.clone() };
    // Validate everything before a run directory exists.
    let protocol = build_protocol(&spec.taxonomy(), &a.split)?;
    let corpus = generate_corpus(&spec)?;
    let held = generate_corpus(&held_spec)?;

    let run = RunDir::create(root, "gen-data")?;
    let data = DataDir::new(&run.path);
    corpus.save(&data.corpus)?;
    held.save(&data.held_out)?;
    protocol.save(&data.protocol)?;
    let config = json!({ "corpus": to_json(&spec)?, "held_out": to_json(&held_spec)?, "split": a.split });
    let mut m = RunManifest::new(&run, "gen-data", config);
    m.corpus = Some(absolute(&data.corpus)?);
    m.held_out = Some(absolute(&data.held_out)?);
    m.protocol = Some(absolute(&data.protocol)?);
    m.write(&run)?;
    info!("{} training and {} held-out images, {} phases", corpus.samples.len(), held.samples.len(), protocol.num_phases());
    Ok(run.path)
}

pub fn embed_classes(root: &Path, a: &EmbedArgs) -> CliResult<PathBuf> {
    let data = DataDir::new(&a.data);
    let taxonomy = read_taxonomy(&data.corpus)?;
    let source = SourceSpec::from_str(&a.source)?;
    let table = source.resolve(&taxonomy, a.dim, a.seed)?;
    table.check_covers(&taxonomy)?;
    let run = RunDir::create(root, "embed-classes")?;
    let out = run.file("table.json");
    table.save(&out)?;
    let mut m = RunManifest::new(&run, "embed-classes", json!({ "source": a.source, "dim": table.dim(), "seed": a.seed }));
    m.corpus = Some(absolute(&data.corpus)?);
    m.table = Some(absolute(&out)?);
    m.write(&run)?;
    Ok(run.path)
}

fn set_kd_flag(cfg: &mut TrainConfig, spec: &str) -> CliResult<()> {
    let usage = || CliError::Usage(format!("--kd {spec:?} is not TERM=on|off with TERM out, vis or proj"));
    let (term, value) = spec.split_once('=').ok_or_else(usage)?;
    let on = match value.to_ascii_lowercase().as_str() {
        "on" | "true" | "1" => true,
        "off" | "false" | "0" => false,
        _ => return Err(usage()),
    };
    match term.to_ascii_lowercase().as_str() {
        "out" => cfg.kd.out = on,
        "vis" => cfg.kd.vis = on,
        "proj" => cfg.kd.proj = on,
        _ => return Err(usage()),
    }
    Ok(())
}

fn resolve_train_config(a: &TrainArgs) -> CliResult<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    for s in &a.ablate {
        cfg.ablation.set(s).map_err(|e| CliError::Usage(e.to_string()))?;
    }
    for s in &a.kd {
        set_kd_flag(&mut cfg, s)?;
    }
    if let Some(v) = a.beta {
        cfg.model.beta = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if a.base_epochs.is_some() {
        cfg.base_epochs = a.base_epochs;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.queries {
        cfg.model.num_queries = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if a.no_pseudo_labels {
        cfg.pseudo_labels = false;
    }
    Ok(cfg)
}

fn resolve_protocol(choice: &str, data: &DataDir, taxonomy: &[String]) -> CliResult<IncrementalProtocol> {
    Ok(match choice {
        "data" => IncrementalProtocol::load(&data.protocol, taxonomy.to_vec())?,
        "joint" => IncrementalProtocol::from_phases(taxonomy.to_vec(), vec![(0..taxonomy.len()).collect()])?,
        path => IncrementalProtocol::load(Path::new(path), taxonomy.to_vec())?,
    })
}

pub fn train(root: &Path, a: &TrainArgs) -> CliResult<PathBuf> {
    let mut cfg = resolve_train_config(a)?;
    let data = DataDir::new(&a.data);
    let corpus = Corpus::load(&data.corpus)?;
    let held = Corpus::load(&data.held_out)?;
    if held.taxonomy != corpus.taxonomy {
        return Err(DcaError::Format("training and held-out corpora differ in taxonomy".into()).into());
    }
    cfg.model.image_size = corpus.image_size;
    cfg.validate()?;
    let protocol = resolve_protocol(&a.protocol, &data, &corpus.taxonomy)?;
    let table = match &a.table {
        Some(p) => load_embedding_table(p, &corpus.taxonomy)?,
        None => synth_embeddings(&corpus.taxonomy, cfg.model.d_se, cfg.seed)?,
    };

    let run = RunDir::create(root, "train")?;
    let (cfg_path, protocol_path, table_path) = (run.file("config.json"), run.file("protocol.json"), run.file("table.json"));
    cfg.save(&cfg_path)?;
    protocol.save(&protocol_path)?;
    table.save(&table_path)?;
    let mut m = RunManifest::new(&run, "train", to_json(&cfg)?);
    m.corpus = Some(absolute(&data.corpus)?);
    m.held_out = Some(absolute(&data.held_out)?);
    m.protocol = Some(absolute(&protocol_path)?);
    m.table = Some(absolute(&table_path)?);
    m.write(&run)?;

    let outputs = RunOutputs { dir: run.path.clone() };
    let result = run_protocol(&corpus, &held.samples, &protocol, &table, &cfg, Some(&outputs), a.with_upper_bound)?;
    let phases = to_json(&result.phases)?;
    write_text(&run.file("results.json"), &serde_json::to_string_pretty(&phases).map_err(DcaError::from)?)?;
    m.checkpoints = result.phases.iter().filter_map(|p| p.checkpoint.clone()).map(|p| absolute(&p)).collect::<CliResult<_>>()?;
    if a.with_upper_bound {
        m.checkpoints.push(absolute(&outputs.upper_bound_checkpoint())?);
    }
    m.write(&run)?;
    Ok(run.path)
}

/// A finished `train` run loaded for analysis.
struct TrainedRun {
    manifest: RunManifest,
    cfg: TrainConfig,
    protocol: IncrementalProtocol,
    table: SemanticTable,
    dir: PathBuf,
}

impl TrainedRun {
    fn open(dir: &Path) -> CliResult<Self> {
        let manifest = RunManifest::load(dir)?;
        if manifest.command != "train" {
            return Err(DcaError::Config(format!("{} is a {} run, not a train run", dir.display(), manifest.command)).into());
        }
        let cfg = TrainConfig::load(&dir.join("config.json"))?;
        let corpus = manifest.corpus.clone().ok_or_else(|| DcaError::Config("manifest lists no corpus".into()))?;
        let taxonomy = read_taxonomy(&corpus)?;
        let protocol = IncrementalProtocol::load(&dir.join("protocol.json"), taxonomy.clone())?;
        let table = load_embedding_table(&dir.join("table.json"), &taxonomy)?;
        Ok(Self { manifest, cfg, protocol, table, dir: dir.to_path_buf() })
    }

    fn phase_or_last(&self, phase: Option<usize>) -> CliResult<usize> {
        let t = phase.unwrap_or(self.protocol.num_phases());
        if t == 0 || t > self.protocol.num_phases() {
            return Err(DcaError::Protocol(format!("phase {t} outside 1..={}", self.protocol.num_phases())).into());
        }
        Ok(t)
    }

    fn checkpoint(&self, phase: usize) -> PathBuf {
        RunOutputs { dir: self.dir.clone() }.checkpoint(phase)
    }

    fn model(&self, phase: usize) -> CliResult<Detector> {
        Ok(load_checkpoint(&self.checkpoint(phase))?.model)
    }

    fn held_out(&self) -> CliResult<Corpus> {
        let path = self.manifest.held_out.clone().ok_or_else(|| DcaError::Config("manifest lists no held-out corpus".into()))?;
        Ok(Corpus::load(&path)?)
    }

    fn old_classes(&self, phase: usize) -> CliResult<Vec<usize>> {
        Ok(if phase > 1 { self.protocol.visible_classes(phase - 1)? } else { Vec::new() })
    }
}

pub fn eval(root: &Path, a: &EvalArgs) -> CliResult<PathBuf> {
    let tr = TrainedRun::open(&a.run)?;
    let t = tr.phase_or_last(a.phase)?;
    let model = tr.model(t)?;
    let held = tr.held_out()?;
    let mut report = evaluate(&model, &tr.table, &held.samples, &tr.old_classes(t)?, &tr.cfg.eval)?;
    let mut checkpoints = vec![absolute(&tr.checkpoint(t))?];
    if let Some(upper_dir) = &a.upper_bound {
        let up = TrainedRun::open(upper_dir)?;
        let last = up.phase_or_last(None)?;
        let upper = evaluate(&up.model(last)?, &up.table, &held.samples, &[], &tr.cfg.eval)?;
        report = report.with_upper_bound(&upper)?;
        checkpoints.push(absolute(&up.checkpoint(last))?);
    }
    let run = RunDir::create(root, "eval")?;
    let out = run.file("report.json");
    report.save(&out)?;
    let config = json!({ "run": absolute(&a.run)?, "phase": t, "upper_bound": a.upper_bound.as_deref().map(absolute).transpose()? });
    let mut m = RunManifest::new(&run, "eval", config);
    m.held_out = tr.manifest.held_out.clone();
    m.protocol = tr.manifest.protocol.clone();
    m.table = tr.manifest.table.clone();
    m.checkpoints = checkpoints;
    m.write(&run)?;
    info!("phase {t}: mAP50 {:.4}, mAP {:.4}", report.map50, report.map_coco);
    Ok(run.path)
}

pub fn analyze_forgetting(root: &Path, a: &AnalyzeArgs) -> CliResult<PathBuf> {
    let tr = TrainedRun::open(&a.run)?;
    let last = tr.phase_or_last(None)?;
    let models = (1..=last).map(|t| tr.model(t)).collect::<CliResult<Vec<_>>>()?;
    let held = tr.held_out()?;
    let rows = forgetting_report(&models, &tr.table, &held.samples, &tr.protocol, a.recall_iou)?;
    let run = RunDir::create(root, "analyze-forgetting")?;
    write_text(&run.file("forgetting.csv"), &forgetting_csv(&rows))?;
    if a.features {
        let features = export_features(&models[last - 1], last, &tr.table, &held.samples)?;
        write_text(&run.file("features.csv"), &feature_csv(&features))?;
    }
    let mut m = RunManifest::new(&run, "analyze-forgetting", json!({ "run": absolute(&a.run)?, "recall_iou": a.recall_iou, "features": a.features }));
    m.held_out = tr.manifest.held_out.clone();
    m.table = tr.manifest.table.clone();
    m.protocol = tr.manifest.protocol.clone();
    m.checkpoints = (1..=last).map(|t| absolute(&tr.checkpoint(t))).collect::<CliResult<_>>()?;
    m.write(&run)?;
    Ok(run.path)
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// One sweep row: all seen classes, classes of earlier phases, classes of
/// the evaluated phase, and the mean of the latter two.
fn sweep_row(beta: f64, report: &EvalReport, old: &[usize], new: &[usize]) -> String {
    let (o, n) = (report.map50_over(old), report.map50_over(new));
    let avg = o.zip(n).map(|(o, n)| (o + n) / 2.0);
    format!("{beta},{},{},{},{}\n", cell(Some(report.map50)), cell(o), cell(n), cell(avg))
}

pub fn sweep_beta(root: &Path, a: &SweepArgs) -> CliResult<PathBuf> {
    if let Some(b) = a.betas.iter().find(|b| !(0.0..=1.0).contains(*b)) {
        return Err(CliError::Usage(format!("beta {b} outside [0, 1]")));
    }
    let tr = TrainedRun::open(&a.run)?;
    let t = tr.phase_or_last(a.phase)?;
    let model = tr.model(t)?;
    let held = tr.held_out()?;
    let old = tr.old_classes(t)?;
    let new = tr.protocol.phase_classes(t)?.to_vec();
    // Predictions do not depend on beta; only the fusion is recomputed.
    let preds = collect_predictions(&model, &tr.table, &held.samples)?;
    let mut csv = String::from("beta,all,old,new,avg\n");
    for &beta in &a.betas {
        let scores: Vec<_> = preds.iter().map(|p| p.refused(beta)).collect();
        let report = report_from_scores(&preds, &scores, model.class_ids(), &held.samples, &old, &tr.cfg.eval)?;
        csv.push_str(&sweep_row(beta, &report, &old, &new));
    }
    let run = RunDir::create(root, "sweep-beta")?;
    write_text(&run.file("sweep.csv"), &csv)?;
    let mut m = RunManifest::new(&run, "sweep-beta", json!({ "run": absolute(&a.run)?, "phase": t, "betas": a.betas }));
    m.held_out = tr.manifest.held_out.clone();
    m.table = tr.manifest.table.clone();
    m.checkpoints = vec![absolute(&tr.checkpoint(t))?];
    m.write(&run)?;
    Ok(run.path)
}
