use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{io_err, pretty, PipelineError, RunConfig};
use crate::stack::AttentionStack;

pub const MANIFEST_FILE: &str = "run.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String, PipelineError> {
    let mut f = fs::File::open(path).map_err(io_err(path))?;
    let mut h = Sha256::new();
    std::io::copy(&mut f, &mut h).map_err(io_err(path))?;
    Ok(hex::encode(h.finalize()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub name: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputEntry {
    pub role: String,
    pub sha256: String,
}

/// `run.json`: the only artifact carrying a wall-clock timestamp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub created_at: String,
    pub config: RunConfig,
    pub inputs: Vec<InputEntry>,
    pub artifacts: Vec<ArtifactEntry>,
    pub capture: CaptureSummary,
    pub versions: Versions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptureSummary {
    pub model_id: String,
    pub timestep: u32,
    pub prompt: String,
    /// Layers per resolution side.
    pub census: Vec<(usize, usize)>,
    pub cross_attention: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub attnmask: String,
    pub archive_format: u16,
}

impl RunManifest {
    pub(crate) fn new(
        config: &RunConfig,
        inputs: Vec<(String, String)>,
        artifacts: Vec<ArtifactEntry>,
        stack: &AttentionStack,
    ) -> Self {
        let mut h = Sha256::new();
        h.update(config.canonical_json());
        for (role, digest) in &inputs {
            h.update(role.as_bytes());
            h.update(digest.as_bytes());
        }
        Self {
            run_id: hex::encode(h.finalize()),
            created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            config: config.clone(),
            inputs: inputs
                .into_iter()
                .map(|(role, sha256)| InputEntry { role, sha256 })
                .collect(),
            artifacts,
            capture: CaptureSummary {
                model_id: stack.metadata.model_id.clone(),
                timestep: stack.metadata.timestep,
                prompt: stack.metadata.prompt.clone(),
                census: stack.census().into_iter().collect(),
                cross_attention: stack.has_cross_attention(),
            },
            versions: Versions {
                attnmask: env!("CARGO_PKG_VERSION").to_string(),
                archive_format: crate::archive::VERSION,
            },
        }
    }

    pub fn save(&self, dir: &Path) -> Result<(), PipelineError> {
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, pretty(self)).map_err(io_err(&path))
    }

    pub fn load(dir: &Path) -> Result<Self, PipelineError> {
        let path = dir.join(MANIFEST_FILE);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        serde_json::from_slice(&bytes).map_err(|e| PipelineError::Io {
            path,
            source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
        })
    }

    pub fn artifact(&self, name: &str) -> Option<&ArtifactEntry> {
        self.artifacts.iter().find(|a| a.name == name)
    }
}

/// Writes artifacts and records their hashes in write order.
pub(crate) struct ArtifactWriter {
    dir: PathBuf,
    entries: Vec<ArtifactEntry>,
}

impl ArtifactWriter {
    pub fn new(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
            entries: Vec::new(),
        }
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, PipelineError> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(io_err(&path))?;
        self.push(name, sha256_hex(bytes), bytes.len() as u64);
        Ok(path)
    }

    /// Records a file some other process wrote.
    pub fn register(&mut self, name: &str) -> Result<(), PipelineError> {
        let path = self.dir.join(name);
        let len = fs::metadata(&path).map_err(io_err(&path))?.len();
        let digest = sha256_file(&path)?;
        self.push(name, digest, len);
        Ok(())
    }

    fn push(&mut self, name: &str, sha256: String, bytes: u64) {
        self.entries.retain(|e| e.name != name);
        self.entries.push(ArtifactEntry {
            name: name.to_string(),
            sha256,
            bytes,
        });
    }

    pub fn finish(self) -> Vec<ArtifactEntry> {
        self.entries
    }
}
