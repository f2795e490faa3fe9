//! Per-class semantic vectors: loaded from precomputed language-model outputs
//! or synthesized compositionally from class attributes.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use indexmap::IndexMap;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{Shape, PALETTE};
use crate::error::{DcaError, Result};

pub const DEFAULT_TEMPLATE: &str = "a photo of a {}";
const PLACEHOLDER: &str = "{}";

/// Substitutes `class_name` into a template holding exactly one `{}`.
pub fn fill_template(class_name: &str, template: &str) -> Result<String> {
    match template.matches(PLACEHOLDER).count() {
        1 => Ok(template.replacen(PLACEHOLDER, class_name, 1)),
        n => Err(DcaError::Template(format!("template {template:?} has {n} placeholders, expected exactly one"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemanticSource {
    PrecomputedFile,
    SyntheticCompositional,
}

/// Where a table comes from, as given on the command line:
/// `file:<path>` or `synthetic`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum SourceSpec {
    File(PathBuf),
    Synthetic,
}

impl FromStr for SourceSpec {
    type Err = DcaError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "synthetic" {
            Ok(SourceSpec::Synthetic)
        } else if let Some(path) = s.strip_prefix("file:") {
            Ok(SourceSpec::File(PathBuf::from(path)))
        } else {
            Err(DcaError::Config(format!("semantic source {s:?} is neither `synthetic` nor `file:<path>`")))
        }
    }
}

impl SourceSpec {
    pub fn resolve(&self, taxonomy: &[String], dim: usize, seed: u64) -> Result<SemanticTable> {
        match self {
            SourceSpec::File(path) => load_embedding_table(path, taxonomy),
            SourceSpec::Synthetic => synth_embeddings(taxonomy, dim, seed),
        }
    }
}

/// Unit-norm class vectors in taxonomy order. Immutable apart from
/// appending new classes.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticTable {
    dim: usize,
    entries: IndexMap<String, Vec<f64>>,
    source: SemanticSource,
}

#[derive(Serialize, Deserialize)]
struct EmbeddingFile {
    dim: usize,
    embeddings: IndexMap<String, Vec<f64>>,
}

impl SemanticTable {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn source(&self) -> SemanticSource {
        self.source
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn vector(&self, class_id: usize) -> Option<&[f64]> {
        self.entries.get_index(class_id).map(|(_, v)| v.as_slice())
    }

    pub fn vector_by_name(&self, name: &str) -> Option<&[f64]> {
        self.entries.get(name).map(Vec::as_slice)
    }

    /// Rows for `class_ids`, in the given order.
    pub fn lookup(&self, class_ids: &[usize]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((class_ids.len(), self.dim));
        for (row, &id) in class_ids.iter().enumerate() {
            let v = self.vector(id).ok_or(DcaError::Lookup(id))?;
            out.row_mut(row).iter_mut().zip(v).for_each(|(o, x)| *o = *x);
        }
        Ok(out)
    }

    /// Appends a class; existing rows are untouched.
    pub fn register(&mut self, name: &str, vector: &[f64]) -> Result<usize> {
        if self.entries.contains_key(name) {
            return Err(DcaError::Config(format!("class {name:?} already registered")));
        }
        if vector.len() != self.dim {
            return Err(DcaError::Format(format!("vector for {name:?} has dim {}, table has {}", vector.len(), self.dim)));
        }
        let unit = normalized(vector).ok_or_else(|| DcaError::Format(format!("vector for {name:?} has zero norm")))?;
        self.entries.insert(name.to_string(), unit);
        Ok(self.entries.len() - 1)
    }

    /// Checks that the table has one entry per taxonomy class, in order.
    pub fn check_covers(&self, taxonomy: &[String]) -> Result<()> {
        for (i, name) in taxonomy.iter().enumerate() {
            match self.entries.get_index_of(name.as_str()) {
                Some(j) if j == i => {}
                Some(_) => return Err(DcaError::Format(format!("class {name:?} is out of taxonomy order"))),
                None => return Err(DcaError::Coverage(name.clone())),
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let doc = EmbeddingFile { dim: self.dim, embeddings: self.entries.clone() };
        fs::write(path, serde_json::to_string_pretty(&doc)?).map_err(|e| DcaError::io(path, e))
    }
}

fn normalized(v: &[f64]) -> Option<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (norm.is_finite() && norm > 0.0).then(|| v.iter().map(|x| x / norm).collect())
}

/// Reads `{"dim": d, "embeddings": {"<name>": [..]}}` and keeps the rows of
/// `taxonomy`, normalized, in taxonomy order.
pub fn load_embedding_table(path: &Path, taxonomy: &[String]) -> Result<SemanticTable> {
    let text = fs::read_to_string(path).map_err(|e| DcaError::io(path, e))?;
    let doc: EmbeddingFile = serde_json::from_str(&text)?;
    if doc.dim == 0 {
        return Err(DcaError::Format("embedding dim must be positive".into()));
    }
    if let Some((name, v)) = doc.embeddings.iter().find(|(_, v)| v.len() != doc.dim) {
        return Err(DcaError::Format(format!("vector for {name:?} has {} entries, declared dim is {}", v.len(), doc.dim)));
    }
    let mut table = SemanticTable { dim: doc.dim, entries: IndexMap::new(), source: SemanticSource::PrecomputedFile };
    for name in taxonomy {
        let v = doc.embeddings.get(name).ok_or_else(|| DcaError::Coverage(name.clone()))?;
        table.register(name, v)?;
    }
    Ok(table)
}

/// Compositional stand-in for language-model embeddings.
///
/// Names of the form `"<color> <shape>"` map to `normalize(u_color + u_shape)`.
/// Palette colors and known shapes get mutually orthogonal attribute vectors
/// (a seeded Gram–Schmidt basis, when `dim` allows), so classes sharing an
/// attribute have cosine 1/2 and classes sharing none have cosine 0. Any other
/// name gets a per-name random unit vector.
pub fn synth_embeddings(taxonomy: &[String], dim: usize, seed: u64) -> Result<SemanticTable> {
    if dim < 8 {
        return Err(DcaError::Config(format!("synthetic embedding dim {dim} < 8")));
    }
    let basis = AttributeBasis::new(dim, seed);
    let mut table = SemanticTable { dim, entries: IndexMap::new(), source: SemanticSource::SyntheticCompositional };
    for name in taxonomy {
        let parts: Vec<&str> = name.split_whitespace().collect();
        let v = match parts.as_slice() {
            [color, shape] => {
                let a = basis.attribute(color, seed);
                let b = basis.attribute(shape, seed);
                a.iter().zip(&b).map(|(x, y)| x + y).collect()
            }
            _ => random_unit(dim, seed, name),
        };
        table.register(name, &v)?;
    }
    Ok(table)
}

struct AttributeBasis {
    dim: usize,
    known: Vec<(String, Vec<f64>)>,
}

impl AttributeBasis {
    fn new(dim: usize, seed: u64) -> Self {
        let names: Vec<String> = PALETTE
            .iter()
            .map(|(c, _)| c.to_string())
            .chain(Shape::ALL.iter().map(|s| s.name().to_string()))
            .collect();
        let mut known: Vec<(String, Vec<f64>)> = Vec::new();
        for name in names.into_iter().take(dim) {
            let mut v = random_unit(dim, seed, &format!("attr:{name}"));
            for (_, q) in &known {
                let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= dot * b);
            }
            let v = normalized(&v).expect("gram-schmidt on random vectors");
            known.push((name, v));
        }
        Self { dim, known }
    }

    fn attribute(&self, name: &str, seed: u64) -> Vec<f64> {
        match self.known.iter().find(|(n, _)| n == name) {
            Some((_, v)) => v.clone(),
            None => random_unit(self.dim, seed, &format!("attr:{name}")),
        }
    }
}

fn random_unit(dim: usize, seed: u64, key: &str) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(key.as_bytes()));
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        if let Some(u) = normalized(&v) {
            return u;
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}
