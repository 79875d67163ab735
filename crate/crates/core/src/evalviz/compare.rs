use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ablation, evaluate, export_heatmap, predict};
use crate::error::{Error, Result};
use crate::gridvqa::Sample;
use crate::model::ModelParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub accuracy: f64,
    pub mean_attn_on_target: f64,
    pub mean_kl_q_r: Option<f64>,
    pub accuracy_masked: f64,
    pub ablation_drop: f64,
}

/// Graymap and pixmap of one sample under both models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapFiles {
    pub sample_id: u64,
    pub baseline: [PathBuf; 2],
    pub distilled: [PathBuf; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub n_samples: usize,
    pub baseline: ModelSummary,
    pub distilled: ModelSummary,
    pub heatmaps: Vec<HeatmapFiles>,
}

fn summarise(params: &ModelParams, samples: &[Sample]) -> Result<ModelSummary> {
    let e = evaluate(params, samples)?;
    let a = ablation(params, samples)?;
    Ok(ModelSummary {
        accuracy: e.accuracy,
        mean_attn_on_target: e.mean_attn_on_target,
        mean_kl_q_r: e.mean_kl_q_r,
        accuracy_masked: a.accuracy_masked,
        ablation_drop: a.drop,
    })
}

/// Summaries of both models on `samples`, plus paired heatmaps of the
/// first `n_heatmaps` samples written under `out_dir` together with
/// `summary.json`.
pub fn compare_checkpoints(
    baseline: &ModelParams,
    distilled: &ModelParams,
    samples: &[Sample],
    n_heatmaps: usize,
    out_dir: Option<&Path>,
) -> Result<ComparisonReport> {
    if baseline.config() != distilled.config() {
        return Err(Error::Mismatch(
            "baseline and distilled checkpoints have different model configs".into(),
        ));
    }
    let mut heatmaps = Vec::new();
    if let Some(dir) = out_dir {
        let shown = &samples[..n_heatmaps.min(samples.len())];
        let pb = predict(baseline, shown)?;
        let pd = predict(distilled, shown)?;
        for ((s, b), d) in shown.iter().zip(&pb).zip(&pd) {
            let (b1, b2) = export_heatmap(&b.alpha_q, &s.target_cells, &dir.join(format!("sample{}_baseline", s.id)))?;
            let (d1, d2) = export_heatmap(&d.alpha_q, &s.target_cells, &dir.join(format!("sample{}_distilled", s.id)))?;
            heatmaps.push(HeatmapFiles {
                sample_id: s.id,
                baseline: [b1, b2],
                distilled: [d1, d2],
            });
        }
    }
    let report = ComparisonReport {
        n_samples: samples.len(),
        baseline: summarise(baseline, samples)?,
        distilled: summarise(distilled, samples)?,
        heatmaps,
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("summary.json");
        let mut text = serde_json::to_vec_pretty(&report).expect("report serializes");
        text.push(b'\n');
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(report)
}
