//! Append-only run directories and their manifests.

use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use dca_core::{DcaError, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.json";

/// Record of one command invocation; enough to repeat it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    /// Command line as invoked, program name excluded.
    pub args: Vec<String>,
    /// Fully resolved configuration.
    pub config: serde_json::Value,
    pub config_hash: String,
    pub corpus: Option<PathBuf>,
    pub held_out: Option<PathBuf>,
    pub protocol: Option<PathBuf>,
    pub table: Option<PathBuf>,
    pub checkpoints: Vec<PathBuf>,
}

impl RunManifest {
    pub fn new(run: &RunDir, command: &str, config: serde_json::Value) -> Self {
        Self {
            run_id: run.id.clone(),
            command: command.to_string(),
            args: std::env::args().skip(1).collect(),
            config_hash: content_hash(&config),
            config,
            corpus: None,
            held_out: None,
            protocol: None,
            table: None,
            checkpoints: Vec::new(),
        }
    }

    /// Writes the manifest after checking that every referenced path exists.
    pub fn write(&self, run: &RunDir) -> Result<()> {
        let listed = [&self.corpus, &self.held_out, &self.protocol, &self.table];
        for p in listed.into_iter().flatten().chain(&self.checkpoints) {
            if !p.exists() {
                return Err(DcaError::Config(format!("manifest path {} does not exist", p.display())));
            }
        }
        let path = run.path.join(MANIFEST);
        std::fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| DcaError::io(&path, e))
    }

    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| DcaError::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Git-style object hash (`blob <len>\0<bytes>`) of the compact JSON form,
/// SHA-256 based. Object keys serialize sorted, so equal configs hash equal.
pub fn content_hash(value: &serde_json::Value) -> String {
    let body = serde_json::to_vec(value).expect("JSON values serialize");
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", body.len()).as_bytes());
    h.update(&body);
    format!("{:x}", h.finalize())
}

#[derive(Debug, Clone)]
pub struct RunDir {
    pub id: String,
    pub path: PathBuf,
}

impl RunDir {
    /// Creates `<root>/<command>-NNNN` with the first unused number. Existing
    /// directories are never reused.
    pub fn create(root: &Path, command: &str) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| DcaError::io(root, e))?;
        for n in 1.. {
            let id = format!("{command}-{n:04}");
            let path = root.join(&id);
            match std::fs::create_dir(&path) {
                Ok(()) => return Ok(Self { id, path }),
                Err(e) if e.kind() == ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(DcaError::io(&path, e)),
            }
        }
        unreachable!("run numbers exhausted")
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }
}
