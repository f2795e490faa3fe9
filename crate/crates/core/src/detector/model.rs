//! The decoupled detection transformer.
//!
//! Pipeline: conv stem + encoder produce feature tokens `V_e`; the location
//! queries run through the shared decoder blocks to give `E_local`, which feeds
//! the box head; `E_local` then seeds the class queries of a second pass over
//! the same blocks, optionally joined by adapted semantic vectors, giving
//! `E_cls` for the duplex classifier.

use dca_autodiff::{ConvGeometry, Var};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::layers::{sine_position_encoding, Conv, DecoderBlock, EncoderBlock, Linear, Mlp};
use super::params::{xavier, ParamGroup, ParamId, ParamStore, Session};
use crate::error::{DcaError, Result};
use crate::semantics::SemanticTable;

/// Bias of freshly added class logits: sigmoid(−4.595) ≈ 0.01.
pub const CLASS_PRIOR_BIAS: f64 = -4.595;
/// Standard deviation scale of freshly added class-head columns.
pub const NEW_CLASS_INIT_SCALE: f64 = 0.01;

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub stem: Vec<Conv>,
    pub encoder: Vec<EncoderBlock>,
    pub decoder: Vec<DecoderBlock>,
    pub queries: ParamId,
    pub reg: Mlp,
    pub cls_head: Linear,
    pub proj: Option<Linear>,
    pub temperature: Option<ParamId>,
    pub adapter: Option<Linear>,
}

#[derive(Debug, Clone)]
pub struct Detector {
    config: ModelConfig,
    pub(crate) store: ParamStore,
    pub(crate) layout: Layout,
    class_ids: Vec<usize>,
    position: Array2<f64>,
}

/// Graph handles of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub v_e: Var,
    pub e_local: Var,
    pub e_cls: Var,
    pub e_se: Vec<Var>,
    pub q_se_adapted: Option<Var>,
    pub e_proj: Option<Var>,
    pub boxes: Var,
    pub h: Var,
    pub s: Option<Var>,
    pub p: Var,
    /// `(boxes, fused probabilities)` of intermediate blocks when auxiliary
    /// supervision is on.
    pub aux: Vec<(Var, Var)>,
}

/// Materialized forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub v_e: Array2<f64>,
    pub e_local: Array2<f64>,
    pub e_cls: Array2<f64>,
    pub e_se: Vec<Array2<f64>>,
    pub e_proj: Option<Array2<f64>>,
    pub boxes: Array2<f64>,
    pub h: Array2<f64>,
    pub s: Option<Array2<f64>>,
    pub p: Array2<f64>,
}

impl ForwardOutput {
    pub fn from_vars(s: &Session, v: &ForwardVars) -> Self {
        let get = |x: Var| s.value(x).clone();
        Self {
            v_e: get(v.v_e),
            e_local: get(v.e_local),
            e_cls: get(v.e_cls),
            e_se: v.e_se.iter().map(|&x| get(x)).collect(),
            e_proj: v.e_proj.map(get),
            boxes: get(v.boxes),
            h: get(v.h),
            s: v.s.map(get),
            p: get(v.p),
        }
    }
}

/// Outputs of the duplex classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionOutput {
    pub h: Array2<f64>,
    pub s: Option<Array2<f64>>,
    pub p: Array2<f64>,
    pub e_proj: Option<Array2<f64>>,
}

/// Convex combination `β·h + (1−β)·s`.
pub fn fuse(h: f64, s: f64, beta: f64) -> f64 {
    beta * h + (1.0 - beta) * s
}

impl Detector {
    pub fn new(config: ModelConfig, class_ids: Vec<usize>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let d = config.d_model;
        let [c1, c2] = config.stem_channels;
        let s = config.image_size;
        let geom = |size: usize, channels: usize| ConvGeometry { height: size, width: size, channels, kernel: 3, stride: 2, padding: 1 };
        let stem = vec![
            Conv::new(&mut store, &mut rng, "stem.conv1", geom(s, 3), c1),
            Conv::new(&mut store, &mut rng, "stem.conv2", geom(s / 2, c1), c2),
            Conv::new(&mut store, &mut rng, "stem.conv3", geom(s / 4, c2), d),
        ];
        let encoder = (0..config.encoder_layers)
            .map(|i| EncoderBlock::new(&mut store, &mut rng, &format!("encoder.{i}"), d, config.n_heads, config.ffn_dim))
            .collect();
        let decoder = (0..config.decoder_layers)
            .map(|i| DecoderBlock::new(&mut store, &mut rng, &format!("decoder.{i}"), d, config.n_heads, config.ffn_dim))
            .collect();
        let q = Array2::from_shape_fn((config.num_queries, d), |_| rng.gen_range(-1.7..1.7));
        let queries = store.insert("queries", q, ParamGroup::Transformer);
        let reg = Mlp::new(&mut store, &mut rng, "reg", &[d, d, d, 4]);
        let cls_head = Linear {
            weight: store.insert("cls_head.weight", Array2::zeros((d, 0)), ParamGroup::Transformer),
            bias: store.insert("cls_head.bias", Array2::zeros((1, 0)), ParamGroup::Transformer),
        };
        let (proj, temperature) = if config.duplex {
            let proj = Linear::new(&mut store, &mut rng, "proj", d, config.d_se, ParamGroup::Transformer);
            let t = store.insert("temperature", Array2::from_elem((1, 1), config.temperature_init), ParamGroup::Transformer);
            (Some(proj), Some(t))
        } else {
            (None, None)
        };
        let adapter = config
            .semantic_queries
            .then(|| Linear::new(&mut store, &mut rng, "adapter", config.d_se, d, ParamGroup::Transformer));
        let layout = Layout { stem, encoder, decoder, queries, reg, cls_head, proj, temperature, adapter };
        let g = config.token_grid();
        let position = sine_position_encoding(g, g, d);
        let mut det = Self { config, store, layout, class_ids: Vec::new(), position };
        det.expand_classes(&class_ids, &mut rng)?;
        Ok(det)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Global class id behind each classifier column.
    pub fn class_ids(&self) -> &[usize] {
        &self.class_ids
    }

    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }

    pub fn set_beta(&mut self, beta: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(DcaError::Config(format!("beta {beta} outside [0, 1]")));
        }
        self.config.beta = beta;
        Ok(())
    }

    /// Appends classifier columns for `new_ids`; existing columns are copied
    /// unchanged.
    pub fn expand_classes(&mut self, new_ids: &[usize], rng: &mut impl Rng) -> Result<()> {
        if let Some(dup) = new_ids.iter().find(|c| self.class_ids.contains(c)) {
            return Err(DcaError::Config(format!("class {dup} already present in the classifier")));
        }
        let d = self.config.d_model;
        let add = new_ids.len();
        let w = &mut self.store.get_mut(self.layout.cls_head.weight).value;
        let old = w.ncols();
        let mut grown = Array2::zeros((d, old + add));
        grown.slice_mut(ndarray::s![.., ..old]).assign(w);
        let fresh = xavier(rng, d, add) * (NEW_CLASS_INIT_SCALE / (6.0 / (d + add.max(1)) as f64).sqrt());
        grown.slice_mut(ndarray::s![.., old..]).assign(&fresh);
        *w = grown;
        let b = &mut self.store.get_mut(self.layout.cls_head.bias).value;
        let mut bias = Array2::from_elem((1, old + add), CLASS_PRIOR_BIAS);
        bias.slice_mut(ndarray::s![.., ..old]).assign(b);
        *b = bias;
        self.class_ids.extend_from_slice(new_ids);
        Ok(())
    }

    /// Semantic rows of the classifier's classes, in column order.
    pub fn semantic_rows(&self, table: &SemanticTable) -> Result<Array2<f64>> {
        if table.dim() != self.config.d_se {
            return Err(DcaError::Shape(format!("semantic dim {} but model expects {}", table.dim(), self.config.d_se)));
        }
        for &c in &self.class_ids {
            if table.vector(c).is_none() {
                return Err(DcaError::Coverage(format!("class id {c}")));
            }
        }
        table.lookup(&self.class_ids)
    }

    fn check_image(&self, image: &Array2<f64>) -> Result<()> {
        let s = self.config.image_size;
        if image.dim() != (s * s, 3) {
            return Err(DcaError::Shape(format!("image matrix {:?}, expected ({}, 3)", image.dim(), s * s)));
        }
        Ok(())
    }

    // ---- graph-level building blocks ----

    pub fn extract_features_graph(&self, s: &mut Session, image: &Array2<f64>) -> Result<Var> {
        self.check_image(image)?;
        let mut x = s.constant(image.clone());
        let last = self.layout.stem.len() - 1;
        for (i, conv) in self.layout.stem.iter().enumerate() {
            x = conv.forward(s, x);
            if i < last {
                x = s.tape.relu(x);
            }
        }
        let pos = s.constant(self.position.clone());
        x = s.tape.add(x, pos);
        for block in &self.layout.encoder {
            x = block.forward(s, x);
        }
        Ok(x)
    }

    fn memory_kv(&self, s: &mut Session, v_e: Var) -> Vec<(Var, Var)> {
        self.layout.decoder.iter().map(|b| b.cross_attn.project_kv(s, v_e)).collect()
    }

    /// Location queries through all shared blocks; returns every block output.
    fn localization_pass(&self, s: &mut Session, kv: &[(Var, Var)]) -> Vec<Var> {
        let mut x = s.p(self.layout.queries);
        let n = self.config.num_queries;
        let mut outs = Vec::with_capacity(kv.len());
        for (block, &mem) in self.layout.decoder.iter().zip(kv) {
            x = block.forward(s, x, n, mem).0;
            outs.push(x);
        }
        outs
    }

    /// Class queries (and optional semantic tokens) through all shared blocks.
    /// Returns per-block class embeddings and per-block semantic tokens.
    fn recognition_pass(&self, s: &mut Session, init: Var, semantic: Option<Var>, kv: &[(Var, Var)]) -> (Vec<Var>, Vec<Var>) {
        let n = s.tape.shape(init).0;
        let mut cls = init;
        let mut se = semantic.filter(|v| s.tape.shape(*v).0 > 0);
        let mut cls_outs = Vec::with_capacity(kv.len());
        let mut se_outs = Vec::new();
        for (block, &mem) in self.layout.decoder.iter().zip(kv) {
            let tokens = match se {
                Some(sv) => s.tape.concat_rows(&[cls, sv]),
                None => cls,
            };
            let (c, next_se) = block.forward(s, tokens, n, mem);
            cls = c;
            cls_outs.push(c);
            if let Some(v) = next_se {
                se_outs.push(v);
                se = Some(v);
            }
        }
        (cls_outs, se_outs)
    }

    fn adapt_semantics(&self, s: &mut Session, q_se: &Array2<f64>) -> Option<Var> {
        let adapter = self.layout.adapter.as_ref()?;
        let q = s.constant(q_se.clone());
        Some(adapter.forward(s, q))
    }

    pub fn boxes_graph(&self, s: &mut Session, e_local: Var) -> Var {
        let raw = self.layout.reg.forward(s, e_local);
        s.tape.sigmoid(raw)
    }

    /// Linear head, semantic head and their fusion: `(H, S, P, E_proj)`.
    pub fn classify_graph(&self, s: &mut Session, e_cls: Var, q_se: Var) -> (Var, Option<Var>, Var, Option<Var>) {
        let logits = self.layout.cls_head.forward(s, e_cls);
        let h = s.tape.sigmoid(logits);
        let (Some(proj), Some(temp)) = (&self.layout.proj, self.layout.temperature) else {
            return (h, None, h, None);
        };
        let e_proj = proj.forward(s, e_cls);
        let unit = s.tape.normalize_rows(e_proj, 1e-12);
        let cos = s.tape.matmul_t(unit, q_se);
        let tau = s.p(temp);
        let scaled = s.tape.mul_scalar(cos, tau);
        let sem = s.tape.sigmoid(scaled);
        let beta = self.config.beta;
        let p = if beta == 1.0 {
            h
        } else if beta == 0.0 {
            sem
        } else {
            let a = s.tape.scale(h, beta);
            let b = s.tape.scale(sem, 1.0 - beta);
            s.tape.add(a, b)
        };
        (h, Some(sem), p, Some(e_proj))
    }

    /// Full forward pass on a session; `q_se` holds the semantic rows of the
    /// classifier's classes.
    pub fn forward_graph(&self, s: &mut Session, image: &Array2<f64>, q_se: &Array2<f64>) -> Result<ForwardVars> {
        if q_se.dim() != (self.num_classes(), self.config.d_se) {
            return Err(DcaError::Shape(format!(
                "semantic rows {:?}, expected ({}, {})",
                q_se.dim(),
                self.num_classes(),
                self.config.d_se
            )));
        }
        let v_e = self.extract_features_graph(s, image)?;
        let kv = self.memory_kv(s, v_e);
        let q_se_adapted = self.adapt_semantics(s, q_se);
        let (local_outs, cls_outs, e_se) = if self.config.decoupled {
            let local_outs = self.localization_pass(s, &kv);
            let e_local = *local_outs.last().expect("at least one block");
            let init = if self.config.detach_local {
                let frozen = s.value(e_local).clone();
                s.constant(frozen)
            } else {
                e_local
            };
            let (cls_outs, e_se) = self.recognition_pass(s, init, q_se_adapted, &kv);
            (local_outs, cls_outs, e_se)
        } else {
            let init = s.p(self.layout.queries);
            let (outs, e_se) = self.recognition_pass(s, init, q_se_adapted, &kv);
            (outs.clone(), outs, e_se)
        };
        let e_local = *local_outs.last().expect("at least one block");
        let e_cls = *cls_outs.last().expect("at least one block");
        let q_se_var = s.constant(q_se.clone());
        let boxes = self.boxes_graph(s, e_local);
        let (h, sem, p, e_proj) = self.classify_graph(s, e_cls, q_se_var);
        let mut aux = Vec::new();
        if self.config.aux_loss {
            let last = local_outs.len() - 1;
            for (&l, &c) in local_outs.iter().zip(&cls_outs).take(last) {
                let b = self.boxes_graph(s, l);
                let (_, _, p_aux, _) = self.classify_graph(s, c, q_se_var);
                aux.push((b, p_aux));
            }
        }
        Ok(ForwardVars { v_e, e_local, e_cls, e_se, q_se_adapted, e_proj, boxes, h, s: sem, p, aux })
    }

    // ---- value-level operations ----

    /// Encoded feature tokens `V_e`, `(H/8·W/8) × d`.
    pub fn extract_features(&self, image: &Array2<f64>) -> Result<Array2<f64>> {
        let mut s = Session::inference(&self.store);
        let v = self.extract_features_graph(&mut s, image)?;
        Ok(s.value(v).clone())
    }

    fn check_tokens(&self, v_e: &Array2<f64>) -> Result<()> {
        let want = (self.config.num_tokens(), self.config.d_model);
        if v_e.dim() != want {
            return Err(DcaError::Shape(format!("feature tokens {:?}, expected {want:?}", v_e.dim())));
        }
        Ok(())
    }

    /// Location embeddings `E_local` (N × d).
    pub fn decode_localization(&self, v_e: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_tokens(v_e)?;
        let mut s = Session::inference(&self.store);
        let v = s.constant(v_e.clone());
        let kv = self.memory_kv(&mut s, v);
        let outs = self.localization_pass(&mut s, &kv);
        Ok(s.value(*outs.last().expect("blocks")).clone())
    }

    /// Class embeddings `E_cls` and per-block semantic tokens `E_se`.
    /// `q_se_adapted` is `K × d`; `K = 0` gives a plain decoder pass.
    pub fn decode_recognition(
        &self,
        v_e: &Array2<f64>,
        e_local: &Array2<f64>,
        q_se_adapted: &Array2<f64>,
    ) -> Result<(Array2<f64>, Vec<Array2<f64>>)> {
        self.check_tokens(v_e)?;
        let d = self.config.d_model;
        if e_local.ncols() != d || q_se_adapted.ncols() != d {
            return Err(DcaError::Shape(format!("decoder inputs must be {d} wide")));
        }
        let mut s = Session::inference(&self.store);
        let v = s.constant(v_e.clone());
        let kv = self.memory_kv(&mut s, v);
        let init = s.constant(e_local.clone());
        let se = s.constant(q_se_adapted.clone());
        let (cls, e_se) = self.recognition_pass(&mut s, init, Some(se), &kv);
        let e_cls = s.value(*cls.last().expect("blocks")).clone();
        Ok((e_cls, e_se.iter().map(|&v| s.value(v).clone()).collect()))
    }

    /// Semantic rows mapped to model width; `None` without semantic queries.
    pub fn adapt_semantic_rows(&self, q_se: &Array2<f64>) -> Option<Array2<f64>> {
        let mut s = Session::inference(&self.store);
        let v = self.adapt_semantics(&mut s, q_se)?;
        Some(s.value(v).clone())
    }

    /// Boxes `B` (N × 4) in `(0, 1)`.
    pub fn predict_boxes(&self, e_local: &Array2<f64>) -> Array2<f64> {
        let mut s = Session::inference(&self.store);
        let e = s.constant(e_local.clone());
        let b = self.boxes_graph(&mut s, e);
        s.value(b).clone()
    }

    /// Duplex classifier on given class embeddings with an explicit `beta`.
    pub fn duplex_fusion(&self, e_cls: &Array2<f64>, q_se: &Array2<f64>, beta: f64) -> Result<FusionOutput> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(DcaError::Config(format!("beta {beta} outside [0, 1]")));
        }
        let mut model = self.clone();
        model.config.beta = beta;
        let mut s = Session::inference(&model.store);
        let e = s.constant(e_cls.clone());
        let q = s.constant(q_se.clone());
        let (h, sem, p, proj) = model.classify_graph(&mut s, e, q);
        Ok(FusionOutput {
            h: s.value(h).clone(),
            s: sem.map(|v| s.value(v).clone()),
            p: s.value(p).clone(),
            e_proj: proj.map(|v| s.value(v).clone()),
        })
    }

    /// Evaluation-mode forward pass.
    pub fn forward(&self, image: &Array2<f64>, table: &SemanticTable) -> Result<ForwardOutput> {
        let q_se = self.semantic_rows(table)?;
        self.forward_with_rows(image, &q_se)
    }

    pub fn forward_with_rows(&self, image: &Array2<f64>, q_se: &Array2<f64>) -> Result<ForwardOutput> {
        let mut s = Session::inference(&self.store);
        let vars = self.forward_graph(&mut s, image, q_se)?;
        Ok(ForwardOutput::from_vars(&s, &vars))
    }
}
