//! Provenance of a run directory.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::protocol::ExperimentConfig;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    Ok(sha256_hex(&std::fs::read(path)?))
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    /// Paths relative to the run directory, with SHA-256 of their contents.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub started_at: u64,
    pub finished_at: Option<u64>,
}

#[derive(Serialize)]
struct HashedPart<'a> {
    command: &'a str,
    config: &'a ExperimentConfig,
    seeds: &'a [u64],
    inputs: &'a BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, config: &ExperimentConfig, seeds: &[u64]) -> Self {
        Self {
            command: command.into(),
            config: config.clone(),
            seeds: seeds.to_vec(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            started_at: unix_now(),
            finished_at: None,
        }
    }

    pub fn add_input(&mut self, run_dir: &Path, rel: &Path) -> Result<()> {
        let hash = hash_file(&run_dir.join(rel))?;
        self.inputs.insert(rel.to_string_lossy().into_owned(), hash);
        Ok(())
    }

    pub fn add_output(&mut self, run_dir: &Path, rel: &Path) -> Result<()> {
        let hash = hash_file(&run_dir.join(rel))?;
        self.outputs.insert(rel.to_string_lossy().into_owned(), hash);
        Ok(())
    }

    /// Hash of everything that determines the outputs; timestamps and
    /// outputs are left out.
    pub fn content_hash(&self) -> String {
        let part = HashedPart {
            command: &self.command,
            config: &self.config,
            seeds: &self.seeds,
            inputs: &self.inputs,
        };
        sha256_hex(&serde_json::to_vec(&part).expect("manifest serializes"))
    }

    pub fn outputs_hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(&self.outputs).expect("outputs serialize"))
    }

    /// Stamps the finish time and writes the manifest to `path`.
    pub fn finish(mut self, path: &Path) -> Result<()> {
        self.finished_at = Some(unix_now());
        std::fs::write(path, serde_json::to_vec_pretty(&self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}
