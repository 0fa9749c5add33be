//! Run manifests: every CLI invocation records its fully-resolved
//! configuration plus content hashes of every input file, so any run is
//! reproducible from the manifest alone.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::Result;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub subcommand: String,
    pub seed: u64,
    /// Fully-resolved flag -> value map, defaults included.
    pub config: BTreeMap<String, Value>,
    /// Input path -> sha256 of file contents.
    pub input_hashes: BTreeMap<String, String>,
    /// Paths written by the run, relative to out_dir where applicable.
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(subcommand: &str, seed: u64) -> Self {
        Self {
            version: MANIFEST_VERSION,
            subcommand: subcommand.to_string(),
            seed,
            config: BTreeMap::new(),
            input_hashes: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl Serialize) {
        self.config.insert(key.to_string(), serde_json::to_value(value).unwrap());
    }

    /// Hash an input file's contents into the manifest.
    pub fn record_input(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path)?;
        self.input_hashes
            .insert(path.display().to_string(), hex_sha256(&bytes));
        Ok(())
    }

    pub fn record_output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    /// Write manifest.json into the run's output directory.
    pub fn write(&self, out_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(out_dir)?;
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(out_dir.join("manifest.json"), text)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn hex_sha256(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
