//! Per-stage run manifests: what was produced, from which config, with
//! which seeds.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cli::config::RunConfig;
use crate::error::{ItoError, Result};

/// Written to `manifests/<stage>.json` after every successful stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub stage: String,
    /// Hash of the resolved config content, invariant to JSON formatting.
    pub config_hash: String,
    pub root_seed: u64,
    /// Derived seeds the stage actually consumed, by stream name.
    pub seeds: BTreeMap<String, u64>,
    /// Paths written, relative to the output directory.
    pub artifacts: Vec<String>,
    /// Wall-clock seconds per stage phase.
    pub timings: BTreeMap<String, f64>,
    /// Free-form diagnostics: skipped steps, sampling warnings, failure counts.
    pub notes: BTreeMap<String, String>,
}

/// SHA-256 of the config serialized with sorted keys, so that formatting,
/// key order, and whitespace in the source file do not change the hash.
pub fn config_hash(cfg: &RunConfig) -> String {
    let value = serde_json::to_value(cfg).expect("config serializes");
    let canonical = serde_json::to_string(&value).expect("value serializes");
    let mut h = Sha256::new();
    h.update(canonical.as_bytes());
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

impl RunManifest {
    pub fn new(stage: &str, cfg: &RunConfig) -> Self {
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            stage: stage.to_string(),
            config_hash: config_hash(cfg),
            root_seed: cfg.seed,
            seeds: BTreeMap::new(),
            artifacts: Vec::new(),
            timings: BTreeMap::new(),
            notes: BTreeMap::new(),
        }
    }

    pub fn record_seed(&mut self, name: &str, seed: u64) {
        self.seeds.insert(name.to_string(), seed);
    }

    pub fn record_artifact(&mut self, out_dir: &Path, path: &Path) {
        let rel = path.strip_prefix(out_dir).unwrap_or(path);
        self.artifacts.push(rel.display().to_string());
    }

    pub fn record_timing(&mut self, name: &str, seconds: f64) {
        self.timings.insert(name.to_string(), seconds);
    }

    /// Writes the manifest under `out_dir/manifests/` and returns its path.
    pub fn write(&mut self, out_dir: &Path) -> Result<std::path::PathBuf> {
        self.artifacts.sort();
        let dir = out_dir.join("manifests");
        std::fs::create_dir_all(&dir).map_err(|e| ItoError::io(dir.display().to_string(), e))?;
        let path = dir.join(format!("{}.json", self.stage));
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| ItoError::Format(format!("manifest serialization: {e}")))?;
        std::fs::write(&path, text).map_err(|e| ItoError::io(path.display().to_string(), e))?;
        Ok(path)
    }
}
