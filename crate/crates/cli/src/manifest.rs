//! Run manifests and atomic file output.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of `"<kind> <len>\0" ‖ bytes`, in the manner of git object ids.
pub fn content_hash(kind: &str, bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("{kind} {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: Value,
    pub overrides: Vec<String>,
    pub inputs: Vec<InputEntry>,
    pub timings_s: BTreeMap<String, f64>,
    pub artifacts: Vec<ArtifactEntry>,
    pub notes: BTreeMap<String, Value>,
}

/// Collects artifacts for one command invocation inside its run directory.
pub struct RunRecorder {
    pub dir: PathBuf,
    manifest: RunManifest,
}

impl RunRecorder {
    pub fn new(dir: PathBuf, command: &str, seed: u64, config_json: &str, overrides: &[String]) -> Result<Self, CliError> {
        fs::create_dir_all(&dir).map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))?;
        let config: Value = serde_json::from_str(config_json).expect("canonical config is JSON");
        Ok(Self {
            dir,
            manifest: RunManifest {
                tool: "dppvae".into(),
                version: env!("CARGO_PKG_VERSION").into(),
                command: command.into(),
                seed,
                config_hash: content_hash("config", config_json.as_bytes()),
                config,
                overrides: overrides.to_vec(),
                inputs: Vec::new(),
                timings_s: BTreeMap::new(),
                artifacts: Vec::new(),
                notes: BTreeMap::new(),
            },
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        write_atomic(&path, bytes)?;
        self.manifest.artifacts.retain(|a| a.path != name);
        self.manifest.artifacts.push(ArtifactEntry {
            path: name.into(),
            bytes: bytes.len() as u64,
            sha256: sha256_hex(bytes),
        });
        Ok(path)
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        self.manifest.inputs.push(InputEntry {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    }

    pub fn timing(&mut self, phase: &str, seconds: f64) {
        self.manifest.timings_s.insert(phase.into(), seconds);
    }

    pub fn note(&mut self, key: &str, value: Value) {
        self.manifest.notes.insert(key.into(), value);
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    /// Writes `manifest.json` last, atomically.
    pub fn finish(self) -> Result<RunManifest, CliError> {
        let text = serde_json::to_string_pretty(&self.manifest).map_err(|e| CliError::Data(e.to_string()))?;
        write_atomic(&self.dir.join(MANIFEST_FILE), text.as_bytes())?;
        Ok(self.manifest)
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

/// Write to a sibling temporary file, then rename over the target.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    drop(f);
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn read_manifest(dir: &Path) -> Option<RunManifest> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE)).ok()?;
    serde_json::from_str(&text).ok()
}
