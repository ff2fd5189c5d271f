//! Run manifests: everything needed to repeat a command, written before the
//! command does any work and finalized when it stops.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Complete,
    Failed,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Fully resolved arguments; `flamegs rerun` replays exactly these.
    pub argv: Vec<String>,
    /// Resolved configuration with every default materialized.
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub threads: usize,
    pub input_hashes: BTreeMap<String, String>,
    pub outputs: Vec<PathBuf>,
    pub status: RunStatus,
    /// Outputs present on disk may be incomplete when this is set.
    pub partial_outputs: bool,
    pub error: Option<String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Hashes a file, or every regular file directly inside a directory.
pub fn hash_inputs(paths: &[&Path]) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for p in paths {
        if p.is_dir() {
            let mut entries: Vec<_> = fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|e| e.is_file())
                .collect();
            entries.sort();
            for e in entries {
                out.insert(e.display().to_string(), sha256_file(&e)?);
            }
        } else {
            out.insert(p.display().to_string(), sha256_file(p)?);
        }
    }
    Ok(out)
}

pub struct ManifestWriter {
    path: PathBuf,
    pub manifest: RunManifest,
}

impl ManifestWriter {
    pub fn start(path: PathBuf, manifest: RunManifest) -> Result<Self> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
        }
        let w = Self { path, manifest };
        w.flush()?;
        Ok(w)
    }

    fn flush(&self) -> Result<()> {
        fs::write(&self.path, serde_json::to_string_pretty(&self.manifest)?)
            .with_context(|| format!("writing manifest {}", self.path.display()))
    }

    pub fn finish<T>(mut self, result: &Result<T>) -> Result<()> {
        match result {
            Ok(_) => self.manifest.status = RunStatus::Complete,
            Err(e) => {
                self.manifest.status = RunStatus::Failed;
                self.manifest.error = Some(format!("{e:#}"));
                self.manifest.partial_outputs = self.manifest.outputs.iter().any(|p| p.exists());
            }
        }
        self.flush()
    }
}

pub fn read_manifest(path: &Path) -> Result<RunManifest> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}
