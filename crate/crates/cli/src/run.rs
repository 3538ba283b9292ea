//! Run directories and their manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::config::config_hash;
use crate::CliError;

pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: Value,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    /// Input path to SHA-256 of its contents (directories hash their files).
    pub input_hashes: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    /// Facts decided during the run, such as the shuffle permutation.
    #[serde(default)]
    pub details: BTreeMap<String, Value>,
    pub tool_version: String,
    pub created: String,
}

impl RunManifest {
    pub fn new(subcommand: &str, config: &impl Serialize, seeds: Vec<u64>) -> Self {
        Self {
            subcommand: subcommand.to_string(),
            config: serde_json::to_value(config).expect("config serializes"),
            config_hash: config_hash(config),
            seeds,
            input_hashes: BTreeMap::new(),
            outputs: Vec::new(),
            details: BTreeMap::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            created: chrono::Utc::now().to_rfc3339(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<(), CliError> {
        let digest = hash_path(path).map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
        self.input_hashes.insert(path.display().to_string(), digest);
        Ok(())
    }
}

fn hash_path(path: &Path) -> std::io::Result<String> {
    let mut h = Sha256::new();
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
        entries.sort();
        for p in entries.into_iter().filter(|p| p.is_file()) {
            h.update(p.file_name().unwrap_or_default().as_encoded_bytes());
            h.update(fs::read(&p)?);
        }
    } else {
        h.update(fs::read(path)?);
    }
    Ok(hex::encode(h.finalize()))
}

/// `<root>/<timestamp>-<hash12>-<subcommand>`, or `out` verbatim.
pub struct RunDir {
    pub path: PathBuf,
    pub manifest: RunManifest,
}

impl RunDir {
    pub fn create(root: &Path, out: Option<&Path>, manifest: RunManifest) -> Result<Self, CliError> {
        let path = match out {
            Some(p) => p.to_path_buf(),
            None => root.join(format!(
                "{}-{}-{}",
                chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ"),
                &manifest.config_hash[..12],
                manifest.subcommand
            )),
        };
        fs::create_dir_all(&path).map_err(|e| CliError::runtime(format!("cannot create {}: {e}", path.display())))?;
        Ok(Self { path, manifest })
    }

    pub fn join(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn output(&mut self, name: &str) -> PathBuf {
        self.manifest.outputs.push(name.to_string());
        self.path.join(name)
    }

    pub fn finish(&self) -> Result<PathBuf, CliError> {
        let path = self.path.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.manifest).map_err(CliError::runtime)?;
        fs::write(&path, text).map_err(CliError::runtime)?;
        Ok(path)
    }
}
