use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordKind {
    /// Loss of a single minibatch.
    Batch,
    /// Epoch means plus validation metrics.
    Epoch,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub stage: u8,
    /// 1-based epoch within the stage.
    pub epoch: usize,
    /// Optimizer steps taken so far across both stages.
    pub step: u64,
    pub kind: RecordKind,
    pub l_q: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_r: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kl: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_acc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_acc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attn_on_target: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_kl: Option<f64>,
}

/// Append-only JSON-lines log, optionally mirrored to a file.
#[derive(Debug, Default)]
pub struct MetricsLog {
    path: Option<PathBuf>,
    file: Option<File>,
    records: Vec<MetricRecord>,
}

impl MetricsLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Appends to `path`, creating it if needed.
    pub fn to_file(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: Some(path.to_path_buf()),
            file: Some(file),
            records: Vec::new(),
        })
    }

    pub fn push(&mut self, record: MetricRecord) -> Result<()> {
        if let (Some(file), Some(path)) = (&mut self.file, &self.path) {
            let mut line = serde_json::to_vec(&record).expect("records serialize");
            line.push(b'\n');
            file.write_all(&line).map_err(|e| Error::io(path, e))?;
        }
        self.records.push(record);
        Ok(())
    }

    /// Records pushed through this handle.
    pub fn records(&self) -> &[MetricRecord] {
        &self.records
    }

    pub fn epochs(&self) -> impl Iterator<Item = &MetricRecord> {
        self.records.iter().filter(|r| r.kind == RecordKind::Epoch)
    }
}

/// Parses a metrics log file.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1))))
        .collect()
}
