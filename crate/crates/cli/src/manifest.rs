//! Run manifests: tool version, seed, input/output digests, and timings.
//!
//! Every subcommand writes one manifest next to its outputs. Primary
//! artifacts are byte-identical across reruns with the same arguments, seed,
//! and inputs; manifests may differ only in their timing entries.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use wholebody_core::io::SCHEMA_VERSION;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: String,
    pub tool_version: String,
    pub command: String,
    pub seed: u64,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    /// Wall-clock timings; the only fields allowed to differ between
    /// otherwise identical runs.
    pub timings_ms: BTreeMap<String, u128>,
    /// Command-specific summary values (errors, counts, scores).
    pub extra: BTreeMap<String, serde_json::Value>,
}

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

impl RunManifest {
    pub fn new(command: &str, seed: u64) -> Self {
        RunManifest {
            schema_version: SCHEMA_VERSION.to_owned(),
            tool_version: env!("CARGO_PKG_VERSION").to_owned(),
            command: command.to_owned(),
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            timings_ms: BTreeMap::new(),
            extra: BTreeMap::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> anyhow::Result<()> {
        self.inputs.push(FileDigest {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    pub fn add_output(&mut self, path: &Path) -> anyhow::Result<()> {
        self.outputs.push(FileDigest {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    pub fn timing(&mut self, label: &str, ms: u128) {
        self.timings_ms.insert(label.to_owned(), ms);
    }

    pub fn extra_value(&mut self, key: &str, value: serde_json::Value) {
        self.extra.insert(key.to_owned(), value);
    }

    /// Manifest path next to an output file or inside an output directory.
    pub fn path_for(out: &Path) -> PathBuf {
        if out.is_dir() {
            out.join("manifest.json")
        } else {
            let mut name = out.file_name().unwrap_or_default().to_owned();
            name.push(".manifest.json");
            out.with_file_name(name)
        }
    }

    pub fn write(&self, out: &Path) -> anyhow::Result<PathBuf> {
        let path = Self::path_for(out);
        std::fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Re-hash recorded inputs and outputs; fails when any file changed.
    pub fn verify(&self) -> anyhow::Result<()> {
        for digest in self.inputs.iter().chain(&self.outputs) {
            let actual = sha256_file(Path::new(&digest.path))?;
            if actual != digest.sha256 {
                anyhow::bail!("digest mismatch for {}", digest.path);
            }
        }
        Ok(())
    }
}
