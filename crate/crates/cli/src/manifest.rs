//! One `manifest.json` per run directory.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use ghost_stereo::ModelConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub version: String,
    pub config: ModelConfig,
    /// SHA-256 of `blob <len>\0<compact config JSON>`.
    pub config_hash: String,
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
    /// `"ok"` or `"failed"`.
    pub status: String,
    pub error: Option<String>,
    pub metrics: serde_json::Value,
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Content hash of a configuration in git's blob framing.
pub fn config_hash(cfg: &ModelConfig) -> String {
    let body = serde_json::to_string(cfg).expect("config serializes");
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", body.len()));
    h.update(body.as_bytes());
    hex::encode(h.finalize())
}

impl RunManifest {
    pub fn begin(command: &str, config: &ModelConfig) -> Self {
        RunManifest {
            command: command.to_string(),
            argv: std::env::args().collect(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.clone(),
            config_hash: config_hash(config),
            started_unix_ms: now_ms(),
            finished_unix_ms: 0,
            status: "running".into(),
            error: None,
            metrics: serde_json::Value::Null,
        }
    }

    pub fn finish(&mut self, outcome: std::result::Result<serde_json::Value, &anyhow::Error>) {
        self.finished_unix_ms = now_ms();
        match outcome {
            Ok(m) => {
                self.status = "ok".into();
                self.metrics = m;
            }
            Err(e) => {
                self.status = "failed".into();
                self.error = Some(format!("{e:#}"));
            }
        }
    }

    /// Write (or replace) the manifest of `dir`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        let tmp = dir.join(format!(".{MANIFEST_FILE}.tmp"));
        let body = serde_json::to_string_pretty(self)?;
        std::fs::write(&tmp, body).with_context(|| format!("cannot write {}", tmp.display()))?;
        std::fs::rename(&tmp, &path).with_context(|| format!("cannot write {}", path.display()))?;
        Ok(path)
    }

    #[cfg(test)]
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).with_context(|| format!("cannot read {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}
