//! Synthetic shape corpora and the class-incremental protocol.
//!
//! Every class is a `(color, shape)` pair, named `"<color> <shape>"`, and
//! taxonomies walk the diagonals of the shape x color grid. Objects are filled shapes on
//! a dim noise background, placed in disjoint grid cells so that boxes never
//! overlap.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DcaError, Result};
use crate::eval::BBox;

/// Slack allowed on box edges outside the unit square.
pub const BOX_EPS: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
    Diamond,
}

impl Shape {
    pub const ALL: [Shape; 5] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Cross, Shape::Diamond];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
            Shape::Diamond => "diamond",
        }
    }

    /// Coverage test in local coordinates `(u, v) ∈ [0,1]²`, `v` pointing down.
    fn covers(self, u: f64, v: f64) -> bool {
        let (du, dv) = (u - 0.5, v - 0.5);
        match self {
            Shape::Circle => du * du + dv * dv <= 0.25,
            Shape::Square => true,
            Shape::Triangle => du.abs() <= v / 2.0,
            Shape::Cross => du.abs() <= 1.0 / 6.0 || dv.abs() <= 1.0 / 6.0,
            Shape::Diamond => du.abs() + dv.abs() <= 0.5,
        }
    }
}

/// Named RGB colors usable in a class grid.
pub const PALETTE: [(&str, [f32; 3]); 8] = [
    ("red", [0.95, 0.15, 0.15]),
    ("green", [0.15, 0.9, 0.2]),
    ("blue", [0.2, 0.35, 1.0]),
    ("yellow", [0.95, 0.9, 0.15]),
    ("magenta", [0.9, 0.2, 0.9]),
    ("cyan", [0.15, 0.9, 0.95]),
    ("orange", [1.0, 0.55, 0.1]),
    ("white", [0.95, 0.95, 0.95]),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n_samples: usize,
    pub image_size: usize,
    pub n_shapes: usize,
    pub n_colors: usize,
    pub max_objects: usize,
    pub min_object_px: usize,
    pub max_object_px: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_samples: 100,
            image_size: 64,
            n_shapes: 4,
            n_colors: 5,
            max_objects: 6,
            min_object_px: 8,
            max_object_px: 18,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn n_classes(&self) -> usize {
        self.n_shapes * self.n_colors
    }

    /// Shape and color indices of a class. Classes run along the diagonals
    /// of the shape x color grid (`color = (shape + diagonal) % n_colors`),
    /// so any prefix of the taxonomy spreads over shapes and colors alike.
    pub fn class_cell(&self, class_id: usize) -> (usize, usize) {
        let (diagonal, shape) = (class_id / self.n_shapes, class_id % self.n_shapes);
        (shape, (shape + diagonal) % self.n_colors)
    }

    pub fn taxonomy(&self) -> Vec<String> {
        (0..self.n_classes())
            .map(|id| {
                let (shape, color) = self.class_cell(id);
                format!("{} {}", PALETTE[color].0, Shape::ALL[shape].name())
            })
            .collect()
    }

    fn grid_side(&self) -> usize {
        let mut g = 1;
        while g * g < self.max_objects {
            g += 1;
        }
        g
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(DcaError::Config(msg));
        if self.n_shapes > Shape::ALL.len() || self.n_colors > PALETTE.len() {
            return bad(format!(
                "class grid {}x{} exceeds the available {}x{}",
                self.n_shapes,
                self.n_colors,
                Shape::ALL.len(),
                PALETTE.len()
            ));
        }
        if self.n_classes() < 2 {
            return bad(format!("class grid {}x{} yields fewer than 2 classes", self.n_shapes, self.n_colors));
        }
        if self.n_samples == 0 {
            return bad("n_samples must be at least 1".into());
        }
        if self.max_objects == 0 {
            return bad("max_objects must be at least 1".into());
        }
        if self.min_object_px < 4 || self.min_object_px > self.max_object_px {
            return bad(format!(
                "object size range [{}, {}] px is invalid",
                self.min_object_px, self.max_object_px
            ));
        }
        let cell = self.image_size / self.grid_side();
        if cell < self.max_object_px {
            return bad(format!(
                "image of {0}x{0} px is too small for {1} objects of up to {2} px",
                self.image_size, self.max_objects, self.max_object_px
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxAnnotation {
    pub class_id: usize,
    pub bbox: BBox,
}

impl BoxAnnotation {
    pub fn is_valid(&self) -> bool {
        let [x0, y0, x1, y1] = self.bbox.to_xyxy();
        let inside = |v: f64| (-BOX_EPS..=1.0 + BOX_EPS).contains(&v);
        self.bbox.w > 0.0 && self.bbox.h > 0.0 && [x0, y0, x1, y1].into_iter().all(inside)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionSample {
    pub sample_id: u64,
    /// `H × W × 3`, intensities in `[0, 1]` quantized to 8 bits.
    pub image: Array3<f32>,
    pub annotations: Vec<BoxAnnotation>,
}

impl DetectionSample {
    /// Image as a `(H·W) × 3` matrix, one row per pixel in row-major order.
    pub fn pixel_matrix(&self) -> Array2<f64> {
        let (h, w, _) = self.image.dim();
        Array2::from_shape_fn((h * w, 3), |(p, c)| f64::from(self.image[[p / w, p % w, c]]))
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.annotations.iter().map(|a| a.class_id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub taxonomy: Vec<String>,
    pub image_size: usize,
    pub samples: Vec<DetectionSample>,
}

/// Generates a corpus; a pure function of `spec`.
///
/// Sample `i` always holds an object of class `i mod K`, so every class
/// appears in at least `⌊n/K⌋` samples.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let taxonomy = spec.taxonomy();
    let k = taxonomy.len();
    let size = spec.image_size;
    let grid = spec.grid_side();
    let cell = size / grid;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut samples = Vec::with_capacity(spec.n_samples);
    let mut cells: Vec<usize> = (0..grid * grid).collect();

    for i in 0..spec.n_samples {
        let mut buf = vec![0u8; size * size * 3];
        for px in buf.iter_mut() {
            *px = quantize(rng.gen_range(0.0..0.25));
        }
        let n_objects = rng.gen_range(1..=spec.max_objects);
        cells.shuffle(&mut rng);
        let mut annotations = Vec::with_capacity(n_objects);
        for (j, &cell_idx) in cells.iter().take(n_objects).enumerate() {
            let class_id = if j == 0 { i % k } else { rng.gen_range(0..k) };
            let (shape, color) = spec.class_cell(class_id);
            let (shape, base) = (Shape::ALL[shape], PALETTE[color].1);
            let color = base.map(|c| (c + rng.gen_range(-0.05f32..0.05)).clamp(0.0, 1.0));
            let side = rng.gen_range(spec.min_object_px..=spec.max_object_px);
            let (cy0, cx0) = ((cell_idx / grid) * cell, (cell_idx % grid) * cell);
            let y0 = cy0 + rng.gen_range(0..=cell - side);
            let x0 = cx0 + rng.gen_range(0..=cell - side);
            let extent = paint(&mut buf, size, shape, color, x0, y0, side);
            let Some((px0, py0, px1, py1)) = extent else { continue };
            let s = size as f64;
            let bbox = BBox::from_xyxy(px0 as f64 / s, py0 as f64 / s, (px1 + 1) as f64 / s, (py1 + 1) as f64 / s);
            annotations.push(BoxAnnotation { class_id, bbox });
        }
        let image = Array3::from_shape_fn((size, size, 3), |(y, x, c)| f32::from(buf[(y * size + x) * 3 + c]) / 255.0);
        samples.push(DetectionSample { sample_id: i as u64, image, annotations });
    }
    Ok(Corpus { taxonomy, image_size: size, samples })
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Paints a shape into an RGB buffer; returns the inclusive pixel extent.
fn paint(
    buf: &mut [u8],
    size: usize,
    shape: Shape,
    color: [f32; 3],
    x0: usize,
    y0: usize,
    side: usize,
) -> Option<(usize, usize, usize, usize)> {
    let mut extent: Option<(usize, usize, usize, usize)> = None;
    let rgb = color.map(quantize);
    for dy in 0..side {
        for dx in 0..side {
            let u = (dx as f64 + 0.5) / side as f64;
            let v = (dy as f64 + 0.5) / side as f64;
            if !shape.covers(u, v) {
                continue;
            }
            let (x, y) = (x0 + dx, y0 + dy);
            let at = (y * size + x) * 3;
            buf[at..at + 3].copy_from_slice(&rgb);
            extent = Some(match extent {
                None => (x, y, x, y),
                Some((a, b, c, d)) => (a.min(x), b.min(y), c.max(x), d.max(y)),
            });
        }
    }
    extent
}

/// Number of samples in which each class occurs.
pub fn class_occurrences(corpus: &Corpus) -> Vec<usize> {
    let mut counts = vec![0; corpus.taxonomy.len()];
    for sample in &corpus.samples {
        let present: BTreeSet<usize> = sample.classes().collect();
        for c in present {
            counts[c] += 1;
        }
    }
    counts
}

/// Ordered partition of a taxonomy into disjoint phases.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IncrementalProtocol {
    #[serde(default, skip_serializing)]
    pub taxonomy: Vec<String>,
    pub phases: Vec<Vec<usize>>,
}

impl IncrementalProtocol {
    pub fn from_phases(taxonomy: Vec<String>, phases: Vec<Vec<usize>>) -> Result<Self> {
        let protocol = Self { taxonomy, phases };
        protocol.validate()?;
        Ok(protocol)
    }

    pub fn num_phases(&self) -> usize {
        self.phases.len()
    }

    /// Classes of phase `t` (1-based).
    pub fn phase_classes(&self, t: usize) -> Result<&[usize]> {
        self.check_phase(t)?;
        Ok(&self.phases[t - 1])
    }

    /// `C_1 ∪ … ∪ C_t` in phase order.
    pub fn visible_classes(&self, t: usize) -> Result<Vec<usize>> {
        self.check_phase(t)?;
        Ok(self.phases[..t].iter().flatten().copied().collect())
    }

    /// `C_{t+1} ∪ … ∪ C_T`.
    pub fn future_classes(&self, t: usize) -> Result<Vec<usize>> {
        self.check_phase(t)?;
        Ok(self.phases[t..].iter().flatten().copied().collect())
    }

    fn check_phase(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.phases.len() {
            return Err(DcaError::Protocol(format!("phase {t} outside 1..={}", self.phases.len())));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.taxonomy.len();
        let mut seen = vec![false; k];
        if self.phases.is_empty() {
            return Err(DcaError::Protocol("protocol has no phases".into()));
        }
        for (t, phase) in self.phases.iter().enumerate() {
            if phase.is_empty() {
                return Err(DcaError::Protocol(format!("phase {} is empty", t + 1)));
            }
            for &c in phase {
                if c >= k {
                    return Err(DcaError::Protocol(format!("class id {c} outside taxonomy of {k}")));
                }
                if std::mem::replace(&mut seen[c], true) {
                    return Err(DcaError::Protocol(format!("class id {c} appears in more than one phase")));
                }
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(DcaError::Protocol(format!("class {:?} is not assigned to any phase", self.taxonomy[missing])));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json).map_err(|e| DcaError::io(path, e))
    }

    pub fn load(path: &Path, taxonomy: Vec<String>) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| DcaError::io(path, e))?;
        let raw: IncrementalProtocol = serde_json::from_str(&text)?;
        Self::from_phases(taxonomy, raw.phases)
    }
}

/// Splits `taxonomy` into consecutive phases of the given sizes.
pub fn build_protocol(taxonomy: &[String], split_sizes: &[usize]) -> Result<IncrementalProtocol> {
    if split_sizes.iter().any(|&s| s == 0) {
        return Err(DcaError::Protocol(format!("split {split_sizes:?} has an empty phase")));
    }
    let total: usize = split_sizes.iter().sum();
    if total != taxonomy.len() {
        return Err(DcaError::Protocol(format!(
            "split {split_sizes:?} sums to {total}, taxonomy has {} classes",
            taxonomy.len()
        )));
    }
    let mut start = 0;
    let phases = split_sizes
        .iter()
        .map(|&n| {
            let phase: Vec<usize> = (start..start + n).collect();
            start += n;
            phase
        })
        .collect();
    IncrementalProtocol::from_phases(taxonomy.to_vec(), phases)
}

#[derive(Debug, Clone)]
pub struct PhaseDataset {
    /// 1-based.
    pub phase_index: usize,
    pub samples: Vec<DetectionSample>,
    pub phase_classes: Vec<usize>,
    pub visible_classes: Vec<usize>,
}

/// Training view of phase `t`: only annotations of `C_t` survive, and samples
/// left without annotations are dropped.
pub fn phase_view(corpus: &Corpus, protocol: &IncrementalProtocol, t: usize) -> Result<PhaseDataset> {
    let phase_classes = protocol.phase_classes(t)?.to_vec();
    let allowed: BTreeSet<usize> = phase_classes.iter().copied().collect();
    let samples = corpus
        .samples
        .iter()
        .filter_map(|s| {
            let annotations: Vec<BoxAnnotation> =
                s.annotations.iter().filter(|a| allowed.contains(&a.class_id)).copied().collect();
            (!annotations.is_empty()).then(|| DetectionSample { annotations, ..s.clone() })
        })
        .collect();
    Ok(PhaseDataset { phase_index: t, samples, phase_classes, visible_classes: protocol.visible_classes(t)? })
}

/// Evaluation view: all images, annotations restricted to `classes`.
pub fn restrict_annotations(corpus: &Corpus, classes: &[usize]) -> Vec<DetectionSample> {
    let allowed: BTreeSet<usize> = classes.iter().copied().collect();
    corpus
        .samples
        .iter()
        .map(|s| DetectionSample {
            annotations: s.annotations.iter().filter(|a| allowed.contains(&a.class_id)).copied().collect(),
            ..s.clone()
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct AnnotationFile {
    taxonomy: Vec<String>,
    samples: Vec<AnnotationRecord>,
}

#[derive(Serialize, Deserialize)]
struct AnnotationRecord {
    id: u64,
    file: String,
    boxes: Vec<[f64; 4]>,
    classes: Vec<usize>,
}

impl Corpus {
    /// Writes `images/<id>.png` and `annotations.json` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let images = dir.join("images");
        fs::create_dir_all(&images).map_err(|e| DcaError::io(&images, e))?;
        let mut records = Vec::with_capacity(self.samples.len());
        for sample in &self.samples {
            let file = format!("images/{}.png", sample.sample_id);
            let (h, w, _) = sample.image.dim();
            let raw: Vec<u8> = sample.image.iter().map(|&v| quantize(v)).collect();
            let img = image::RgbImage::from_raw(w as u32, h as u32, raw)
                .ok_or_else(|| DcaError::Format("image buffer size mismatch".into()))?;
            img.save(dir.join(&file))?;
            records.push(AnnotationRecord {
                id: sample.sample_id,
                file,
                boxes: sample.annotations.iter().map(|a| a.bbox.to_array()).collect(),
                classes: sample.annotations.iter().map(|a| a.class_id).collect(),
            });
        }
        let doc = AnnotationFile { taxonomy: self.taxonomy.clone(), samples: records };
        let path = dir.join("annotations.json");
        fs::write(&path, serde_json::to_string(&doc)?).map_err(|e| DcaError::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("annotations.json");
        let text = fs::read_to_string(&path).map_err(|e| DcaError::io(&path, e))?;
        let doc: AnnotationFile = serde_json::from_str(&text)?;
        let mut samples = Vec::with_capacity(doc.samples.len());
        let mut image_size = 0;
        for rec in doc.samples {
            if rec.boxes.len() != rec.classes.len() {
                return Err(DcaError::Format(format!("sample {}: {} boxes but {} classes", rec.id, rec.boxes.len(), rec.classes.len())));
            }
            if let Some(&bad) = rec.classes.iter().find(|&&c| c >= doc.taxonomy.len()) {
                return Err(DcaError::Format(format!("sample {}: class id {bad} outside taxonomy", rec.id)));
            }
            let img = image::open(dir.join(&rec.file))?.to_rgb8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            image_size = image_size.max(w.max(h));
            let image = Array3::from_shape_fn((h, w, 3), |(y, x, c)| f32::from(img.get_pixel(x as u32, y as u32)[c]) / 255.0);
            let annotations = rec
                .boxes
                .iter()
                .zip(&rec.classes)
                .map(|(b, &class_id)| BoxAnnotation { class_id, bbox: BBox::from_array(*b) })
                .collect();
            samples.push(DetectionSample { sample_id: rec.id, image, annotations });
        }
        Ok(Self { taxonomy: doc.taxonomy, image_size, samples })
    }
}
