//! The run manifest: per-stage status, outputs with content hashes, and an
//! append-only event log. A stage is reused on restart when its input
//! fingerprint matches and every recorded output still hashes the same.

use std::fmt;
use std::fs;
use std::io::Read;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{PipelineError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Render,
    Project,
    Drag,
    Reconstruct,
    Deform,
    Sds,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Render,
        Stage::Project,
        Stage::Drag,
        Stage::Reconstruct,
        Stage::Deform,
        Stage::Sds,
        Stage::Evaluate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Render => "render",
            Stage::Project => "project",
            Stage::Drag => "drag",
            Stage::Reconstruct => "reconstruct",
            Stage::Deform => "deform",
            Stage::Sds => "sds",
            Stage::Evaluate => "evaluate",
        }
    }

    pub fn index(self) -> usize {
        Stage::ALL.iter().position(|&s| s == self).unwrap()
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Pending,
    Running,
    Complete,
    Failed,
    Skipped,
}

/// An output file, named by its path relative to the run directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub name: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub status: StageStatus,
    /// Hash of the stage's configuration and all upstream outputs.
    pub fingerprint: Option<String>,
    pub outputs: Vec<Artifact>,
    pub seconds: Option<f64>,
    /// True when the outputs were taken from a previous run.
    #[serde(default)]
    pub reused: bool,
    pub error: Option<String>,
}

impl StageRecord {
    fn pending(stage: Stage) -> Self {
        Self {
            stage,
            status: StageStatus::Pending,
            fingerprint: None,
            outputs: Vec::new(),
            seconds: None,
            reused: false,
            error: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub stage: Stage,
    pub status: StageStatus,
    pub unix_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RunConfig,
    pub config_sha256: String,
    pub stages: Vec<StageRecord>,
    /// Every status change, oldest first. Entries are never rewritten.
    pub events: Vec<Event>,
}

impl RunManifest {
    pub fn new(config: &RunConfig) -> Result<Self> {
        Ok(Self {
            config: config.clone(),
            config_sha256: sha256_hex(&serde_json::to_vec(config)?),
            stages: Stage::ALL.iter().map(|&s| StageRecord::pending(s)).collect(),
            events: Vec::new(),
        })
    }

    pub fn record(&self, stage: Stage) -> &StageRecord {
        &self.stages[stage.index()]
    }

    pub fn record_mut(&mut self, stage: Stage) -> &mut StageRecord {
        &mut self.stages[stage.index()]
    }

    pub fn set_status(&mut self, stage: Stage, status: StageStatus) {
        self.record_mut(stage).status = status;
        self.events.push(Event {
            stage,
            status,
            unix_ms: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64),
        });
    }

    pub fn is_complete(&self) -> bool {
        self.stages.iter().all(|s| s.status == StageStatus::Complete)
    }

    pub fn failed(&self) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.status == StageStatus::Failed)
    }

    /// The stage currently running, if any.
    pub fn running(&self) -> Option<Stage> {
        self.stages.iter().find(|s| s.status == StageStatus::Running).map(|s| s.stage)
    }

    pub fn artifact(&self, name: &str) -> Option<&Artifact> {
        self.stages.iter().flat_map(|s| &s.outputs).find(|a| a.name == name)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Option<Self>> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        match fs::read(&path) {
            Ok(bytes) => Ok(Some(serde_json::from_slice(&bytes)?)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(PipelineError::io(path, e)),
        }
    }

    /// Writes through a temporary file so readers never see a torn manifest.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
        let path = dir.join(MANIFEST_FILE);
        fs::write(&tmp, serde_json::to_vec_pretty(self)?).map_err(|e| PipelineError::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| PipelineError::io(&path, e))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<(String, u64)> {
    let mut file = fs::File::open(path).map_err(|e| PipelineError::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    let mut total = 0u64;
    loop {
        let n = file.read(&mut buf).map_err(|e| PipelineError::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
        total += n as u64;
    }
    Ok((format!("{:x}", hasher.finalize()), total))
}

/// Hashes the named files under `dir` into artifacts.
pub fn describe(dir: &Path, names: &[String]) -> Result<Vec<Artifact>> {
    names
        .iter()
        .map(|name| {
            let (sha256, bytes) = hash_file(&dir.join(name))?;
            Ok(Artifact {
                name: name.clone(),
                sha256,
                bytes,
            })
        })
        .collect()
}

/// True when every artifact exists under `dir` with its recorded hash.
pub fn outputs_intact(dir: &Path, outputs: &[Artifact]) -> bool {
    !outputs.is_empty() && outputs.iter().all(|a| hash_file(&dir.join(&a.name)).is_ok_and(|(h, n)| h == a.sha256 && n == a.bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_input_hash() {
        assert_eq!(sha256_hex(b""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    }

    #[test]
    fn status_changes_append_events() {
        let mut m = RunManifest::new(&RunConfig::default()).unwrap();
        m.set_status(Stage::Render, StageStatus::Running);
        m.set_status(Stage::Render, StageStatus::Complete);
        assert_eq!(m.events.len(), 2);
        assert_eq!(m.record(Stage::Render).status, StageStatus::Complete);
        assert_eq!(m.running(), None);
    }

    #[test]
    fn tampered_output_is_not_intact() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.bin"), b"abc").unwrap();
        let arts = describe(dir.path(), &["a.bin".into()]).unwrap();
        assert!(outputs_intact(dir.path(), &arts));
        fs::write(dir.path().join("a.bin"), b"abd").unwrap();
        assert!(!outputs_intact(dir.path(), &arts));
    }
}
