use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use attd_core::gridvqa::file_crc;
use attd_core::Error;

use crate::Failure;

/// Record of one command invocation: enough to rerun it.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    /// Fully resolved settings after merging the config file and flags.
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    /// CRC32 of the dataset's `manifest.json`, as hex.
    pub dataset_manifest_crc32: Option<String>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub artifacts: Vec<PathBuf>,
}

fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or_default()
}

pub struct RunRecorder {
    manifest: RunManifest,
}

impl RunRecorder {
    pub fn start(command: &str) -> Self {
        Self {
            manifest: RunManifest {
                command: command.into(),
                argv: std::env::args().collect(),
                config: serde_json::Value::Null,
                seed: None,
                dataset_manifest_crc32: None,
                started_unix_ms: now_ms(),
                finished_unix_ms: 0,
                artifacts: Vec::new(),
            },
        }
    }

    pub fn config(&mut self, config: impl Serialize) {
        self.manifest.config = serde_json::to_value(config).expect("configs serialize");
    }

    pub fn seed(&mut self, seed: u64) {
        self.manifest.seed = Some(seed);
    }

    pub fn dataset(&mut self, dir: &Path) -> Result<(), Failure> {
        let path = dir.join("manifest.json");
        let bytes = std::fs::read(&path).map_err(|source| Error::Io { path, source })?;
        self.manifest.dataset_manifest_crc32 = Some(format!("{:08x}", file_crc(&bytes)));
        Ok(())
    }

    pub fn artifact(&mut self, path: impl Into<PathBuf>) {
        self.manifest.artifacts.push(path.into());
    }

    pub fn finish(mut self, path: &Path) -> Result<(), Failure> {
        self.manifest.finished_unix_ms = now_ms();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.into(), source })?;
        }
        let mut text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        text.push('\n');
        std::fs::write(path, text).map_err(|source| Error::Io { path: path.into(), source })?;
        Ok(())
    }
}
