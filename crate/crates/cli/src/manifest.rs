//! Run manifests: what each step read, wrote and was configured with.
//!
//! A manifest holds one entry per command, so a directory that a whole
//! pipeline wrote into ends up with a single file describing every step.
//! Entries carry no timestamps; re-running with the same inputs rewrites the
//! same bytes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub config: Value,
    pub seeds: BTreeMap<String, u64>,
    /// Path as given on the command line to SHA-256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

impl Step {
    pub fn new(config: impl Serialize) -> Self {
        Self { config: serde_json::to_value(config).expect("configs serialize"), ..Default::default() }
    }

    pub fn seed(mut self, name: &str, seed: u64) -> Self {
        self.seeds.insert(name.to_string(), seed);
        self
    }

    pub fn input(mut self, path: &Path) -> Result<Self, CliError> {
        self.inputs.insert(path.display().to_string(), hash_file(path)?);
        Ok(self)
    }

    pub fn output(mut self, path: &Path) -> Result<Self, CliError> {
        self.outputs.insert(path.display().to_string(), hash_file(path)?);
        Ok(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub steps: BTreeMap<String, Step>,
}

impl Default for Manifest {
    fn default() -> Self {
        Self { tool: "hticl".into(), version: env!("CARGO_PKG_VERSION").into(), steps: BTreeMap::new() }
    }
}

pub fn hash_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hticl::sha256_hex(&bytes))
}

/// `explicit`, or `manifest.json` beside `artifact`.
pub fn location(explicit: Option<&Path>, artifact: &Path) -> PathBuf {
    match explicit {
        Some(p) => p.to_path_buf(),
        None => artifact.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new(".")).join("manifest.json"),
    }
}

/// Insert or replace `command`'s entry in the manifest at `path`.
pub fn record(path: &Path, command: &str, step: Step) -> Result<(), CliError> {
    let mut manifest = match std::fs::read(path) {
        Ok(bytes) => serde_json::from_slice(&bytes).unwrap_or_else(|e| {
            log::warn!("{}: unreadable manifest ({e}); starting a new one", path.display());
            Manifest::default()
        }),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Manifest::default(),
        Err(e) => return Err(CliError::io(path, e)),
    };
    manifest.version = env!("CARGO_PKG_VERSION").into();
    manifest.steps.insert(command.to_string(), step);
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}
