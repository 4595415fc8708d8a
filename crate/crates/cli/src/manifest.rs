//! Run manifests: resolved configuration, input/output digests, seed, and
//! timing for every command, so any run can be reproduced and checked.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Option<serde_json::Value>,
    pub inputs: BTreeMap<String, FileDigest>,
    pub outputs: BTreeMap<String, FileDigest>,
    pub seed: Option<u64>,
    pub version: String,
    pub timings: Timings,
}

#[derive(Serialize)]
pub struct Timings {
    pub total_seconds: f64,
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let bytes = std::fs::read(path)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

pub struct ManifestBuilder {
    command: String,
    config: Option<serde_json::Value>,
    seed: Option<u64>,
    inputs: BTreeMap<String, FileDigest>,
    outputs: BTreeMap<String, FileDigest>,
    started: Instant,
}

impl ManifestBuilder {
    pub fn new(command: &str) -> Self {
        ManifestBuilder {
            command: command.to_string(),
            config: None,
            seed: None,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            started: Instant::now(),
        }
    }

    pub fn config<T: Serialize>(&mut self, cfg: &T) {
        self.config = Some(serde_json::to_value(cfg).expect("config serialization"));
    }

    pub fn seed(&mut self, seed: u64) {
        self.seed = Some(seed);
    }

    pub fn input(&mut self, name: &str, path: &Path) -> std::io::Result<()> {
        self.inputs.insert(
            name.to_string(),
            FileDigest { path: path.display().to_string(), sha256: sha256_file(path)? },
        );
        Ok(())
    }

    pub fn output(&mut self, name: &str, path: &Path) -> std::io::Result<()> {
        self.outputs.insert(
            name.to_string(),
            FileDigest { path: path.display().to_string(), sha256: sha256_file(path)? },
        );
        Ok(())
    }

    /// Write the manifest JSON to `path`.
    pub fn write(self, path: &Path) -> std::io::Result<()> {
        let manifest = RunManifest {
            command: self.command,
            config: self.config,
            inputs: self.inputs,
            outputs: self.outputs,
            seed: self.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            timings: Timings { total_seconds: self.started.elapsed().as_secs_f64() },
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serialization");
        std::fs::write(path, json + "\n")
    }
}
