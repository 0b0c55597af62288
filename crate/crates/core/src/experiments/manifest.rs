//! Run manifests: config hash, seed and content hashes of every output file.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::experiments::config::{hex, Config};

/// Git-style object hash: SHA-256 of `blob <len>\0` followed by the bytes.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex(&h.finalize())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputHash {
    pub path: String,
    pub bytes: u64,
    pub hash: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub args: Vec<String>,
    pub version: String,
    pub config_hash: Option<String>,
    pub seed: Option<u64>,
    pub outputs: Vec<OutputHash>,
}

impl Manifest {
    pub fn new(command: &str, args: Vec<String>) -> Self {
        Self {
            command: command.to_string(),
            args,
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: None,
            seed: None,
            outputs: Vec::new(),
        }
    }

    pub fn with_config(mut self, config: &Config) -> Self {
        self.config_hash = Some(config.hash());
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    /// Hashes a written file.
    pub fn add_output(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path)?;
        self.outputs.push(OutputHash { path: path.display().to_string(), bytes: bytes.len() as u64, hash: content_hash(&bytes) });
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("manifest JSON: {e}")))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    /// Outputs whose current content no longer matches the recorded hash.
    pub fn mismatches(&self) -> Vec<String> {
        self.outputs
            .iter()
            .filter(|o| std::fs::read(&o.path).map(|b| content_hash(&b) != o.hash).unwrap_or(true))
            .map(|o| o.path.clone())
            .collect()
    }
}
