//! Run manifests. Everything that determines a run's outputs goes in; wall
//! times and absolute paths stay out, so two runs with the same manifest
//! are interchangeable.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const FILE_NAME: &str = "run_manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub command: String,
    pub tool_version: String,
    pub formats: BTreeMap<String, u32>,
    /// Fully resolved config, including command-line settings.
    pub config: Value,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    /// Content hashes of what the run read.
    pub inputs: BTreeMap<String, String>,
    /// Content hashes of what the run wrote (checkpoints only).
    pub outputs: BTreeMap<String, String>,
}

impl Provenance {
    pub fn new(command: &str, config: Value) -> Self {
        let config_hash = sha256_hex(canonical(&config).as_bytes());
        Provenance {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            formats: BTreeMap::from([
                ("minicube".to_string(), vegecast_core::cube::FORMAT_VERSION),
                ("checkpoint".to_string(), vegecast_model::checkpoint::CHECKPOINT_VERSION),
            ]),
            config,
            config_hash,
            seeds: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn seed(mut self, name: &str, seed: u64) -> Self {
        self.seeds.insert(name.to_string(), seed);
        self
    }

    pub fn input(mut self, name: &str, hash: String) -> Self {
        self.inputs.insert(name.to_string(), hash);
        self
    }

    pub fn output(mut self, name: &str, hash: String) -> Self {
        self.outputs.insert(name.to_string(), hash);
        self
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(FILE_NAME);
        let json = serde_json::to_string_pretty(self).expect("provenance serializes");
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }
}

/// Compact JSON with sorted object keys (serde_json maps are ordered).
pub fn canonical(v: &Value) -> String {
    serde_json::to_string(v).expect("values serialize")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash over the relative names and contents of every file under `dirs`,
/// visited in sorted order.
pub fn hash_dirs(root: &Path, dirs: &[String]) -> Result<String> {
    let mut h = Sha256::new();
    for d in dirs {
        let dir = root.join(d);
        let mut files: Vec<_> = std::fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(&dir, err)))
            .collect::<Result<_>>()?;
        files.sort();
        for f in files.iter().filter(|f| f.is_file()) {
            let bytes = std::fs::read(f).map_err(|e| Error::io(f, e))?;
            let name = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            h.update(format!("{d}/{name}\0{}\0", bytes.len()).as_bytes());
            h.update(&bytes);
        }
    }
    Ok(hex::encode(h.finalize()))
}
