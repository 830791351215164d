//! Run manifests: what a run consumed and produced, with a content hash
//! that leaves out wall-clock fields.

use crate::CliError;
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub tool_version: String,
    pub command: String,
    /// Effective configuration of the command.
    pub config: serde_json::Value,
    pub scenario_hash: Option<String>,
    /// Hex SHA-256 of other input files by role.
    pub inputs: BTreeMap<String, String>,
    pub seeds: Vec<u64>,
    /// Output files relative to the run directory.
    pub outputs: Vec<String>,
}

#[derive(Serialize)]
struct ManifestFile<'a> {
    hash: &'a str,
    created_unix: u64,
    run_dir: String,
    #[serde(flatten)]
    manifest: &'a Manifest,
}

impl Manifest {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        Manifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config,
            scenario_hash: None,
            inputs: BTreeMap::new(),
            seeds: Vec::new(),
            outputs: Vec::new(),
        }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("manifest serializes");
        hex::encode(Sha256::digest(json))
    }

    /// Write `manifest.json` into `dir` and return the hash.
    pub fn write(&self, dir: &Path) -> Result<String, CliError> {
        let hash = self.hash();
        let created_unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let file = ManifestFile {
            hash: &hash,
            created_unix,
            run_dir: dir.display().to_string(),
            manifest: self,
        };
        let mut text = serde_json::to_string_pretty(&file).map_err(|e| CliError::Runtime(e.to_string()))?;
        text.push('\n');
        std::fs::write(dir.join("manifest.json"), text)?;
        Ok(hash)
    }
}

/// Hex SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}
