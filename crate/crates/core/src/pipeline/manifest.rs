//! Run manifest: versions, seeds, parameter hashes, stage timings and a
//! content hash of every output file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputEntry {
    /// Relative to the run directory, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub seed: u64,
    pub params_hash: String,
    pub wall_seconds: f64,
    pub outputs: Vec<OutputEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub manifest_version: u32,
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub threads: usize,
    pub parallel: bool,
    pub config_hash: String,
    pub stages: Vec<StageRecord>,
    pub complete: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_stage: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Manifest {
    pub fn new(seed: u64, threads: usize, config_hash: String) -> Self {
        Manifest {
            manifest_version: MANIFEST_VERSION,
            tool: "traitscale".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed,
            threads,
            parallel: cfg!(feature = "parallel"),
            config_hash,
            stages: Vec::new(),
            complete: false,
            failed_stage: None,
            error: None,
        }
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }

    pub fn outputs(&self) -> impl Iterator<Item = &OutputEntry> {
        self.stages.iter().flat_map(|s| s.outputs.iter())
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        let p = run_dir.join(MANIFEST_FILE);
        std::fs::write(&p, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&p, e))
    }

    pub fn load(run_dir: &Path) -> Result<Self> {
        let p = run_dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path).map_err(|e| Error::io(path, e))?))
}

/// Hash of a serializable parameter set via its JSON form.
pub fn params_hash<T: Serialize>(params: &T) -> Result<String> {
    Ok(sha256_hex(serde_json::to_string(params)?.as_bytes()))
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            walk(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

/// Every file under `run_dir/stage_dir`, sorted by path.
pub fn collect_outputs(run_dir: &Path, stage_dir: &str) -> Result<Vec<OutputEntry>> {
    let mut files = Vec::new();
    let root = run_dir.join(stage_dir);
    if root.is_dir() {
        walk(&root, &mut files)?;
    }
    files
        .into_iter()
        .map(|p| {
            let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
            let rel = p.strip_prefix(run_dir).expect("file under run dir");
            Ok(OutputEntry {
                path: rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"),
                sha256: sha256_hex(&bytes),
                bytes: bytes.len() as u64,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Discrepancy {
    Missing(String),
    Modified(String),
    /// A file in a stage directory the manifest does not list.
    Unlisted(String),
}

/// Re-hash every listed output. An empty result means the run directory
/// matches its manifest.
pub fn verify_run(run_dir: &Path) -> Result<Vec<Discrepancy>> {
    let m = Manifest::load(run_dir)?;
    let mut out = Vec::new();
    for e in m.outputs() {
        let p = run_dir.join(&e.path);
        match std::fs::read(&p) {
            Ok(bytes) => {
                if sha256_hex(&bytes) != e.sha256 {
                    out.push(Discrepancy::Modified(e.path.clone()));
                }
            }
            Err(_) => out.push(Discrepancy::Missing(e.path.clone())),
        }
    }
    for s in &m.stages {
        for e in collect_outputs(run_dir, &s.name)? {
            if !m.outputs().any(|o| o.path == e.path) {
                out.push(Discrepancy::Unlisted(e.path));
            }
        }
    }
    Ok(out)
}
