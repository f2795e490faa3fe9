//! Single-file checkpoints.
//!
//! Layout: 8-byte magic, u64 LE header length, JSON header, then every
//! parameter as f32 LE values in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::model::Detector;
use crate::error::{DcaError, Result};

const MAGIC: &[u8; 8] = b"DCACKPT1";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    /// Offset into the payload, in f32 elements.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    phase: usize,
    class_ids: Vec<usize>,
    params: Vec<TensorEntry>,
}

/// A loaded checkpoint with the phase it was written at.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Detector,
    pub phase: usize,
}

/// Rounds every parameter to f32 precision, matching what a save/load
/// round trip produces.
pub fn quantize_to_storage(model: &mut Detector) {
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        model.params_mut().get_mut(id).value.mapv_inplace(|v| v as f32 as f64);
    }
}

pub fn save_checkpoint(model: &Detector, phase: usize, path: &Path) -> Result<()> {
    let mut entries = Vec::new();
    let mut payload = Vec::new();
    let mut offset = 0;
    for (name, p) in model.params().iter() {
        let (r, c) = p.value.dim();
        entries.push(TensorEntry { name: name.to_string(), shape: [r, c], offset });
        offset += r * c;
        for &v in p.value.iter() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let header = Header { config: model.config().clone(), phase, class_ids: model.class_ids().to_vec(), params: entries };
    let json = serde_json::to_vec(&header)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| DcaError::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| DcaError::io(path, e))?;
    let write = |f: &mut fs::File, bytes: &[u8]| f.write_all(bytes).map_err(|e| DcaError::io(path, e));
    write(&mut f, MAGIC)?;
    write(&mut f, &(json.len() as u64).to_le_bytes())?;
    write(&mut f, &json)?;
    write(&mut f, &payload)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| DcaError::io(path, e))?;
    let bad = |m: &str| DcaError::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + len).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    let payload = &bytes[16 + len..];

    let mut model = Detector::new(header.config, Vec::new(), 0)?;
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    model.expand_classes(&header.class_ids, &mut rng)?;
    if header.params.len() != model.params().len() {
        return Err(bad("parameter count does not match the configuration"));
    }
    for entry in &header.params {
        let id = model.params().id(&entry.name).ok_or_else(|| bad(&format!("unknown parameter {}", entry.name)))?;
        let [r, c] = entry.shape;
        if model.params().get(id).value.dim() != (r, c) {
            return Err(bad(&format!("shape mismatch for {}", entry.name)));
        }
        let start = entry.offset * 4;
        let raw = payload.get(start..start + r * c * 4).ok_or_else(|| bad("truncated payload"))?;
        let values = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64).collect();
        model.params_mut().get_mut(id).value = Array2::from_shape_vec((r, c), values).expect("sized above");
    }
    Ok(Checkpoint { model, phase: header.phase })
}
