//! Accuracy and attention metrics, the object-masking ablation, and
//! attention heatmap export.

mod compare;
mod heatmap;

pub use compare::{compare_checkpoints, ComparisonReport, HeatmapFiles, ModelSummary};
pub use heatmap::{export_heatmap, parse_pgm16, pgm16_bytes, ppm_bytes, HEATMAP_SCALE, OUTLINE};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridvqa::{Dataset, Sample};
use crate::losses::forward_kl;
use crate::model::{forward_batch, reasoning_attention, AttentionMap, Binder, Mode, ModelConfig, ModelParams};
use crate::numcore::{argmax, Tape};

/// Samples per forward pass during evaluation. Fixed so results do not
/// depend on the worker count.
pub const EVAL_BATCH: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub mean_attn_on_target: f64,
    /// Present when every sample carries a rationale.
    pub mean_kl_q_r: Option<f64>,
    pub n_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub accuracy_clean: f64,
    pub accuracy_masked: f64,
    pub drop: f64,
}

/// Per-sample outputs of an evaluation pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub id: u64,
    pub predicted: usize,
    pub correct: bool,
    pub alpha_q: AttentionMap,
    pub alpha_r: Option<AttentionMap>,
    pub attn_on_target: f64,
}

/// Refuses parameters whose shapes cannot consume `ds`.
/// `base` with its grid, visual width and vocabulary taken from `ds`.
pub fn fit_to_dataset(base: &ModelConfig, ds: &Dataset) -> ModelConfig {
    ModelConfig {
        grid_h: ds.config.grid_h,
        grid_w: ds.config.grid_w,
        d_visual: ds.config.d_visual,
        vocab_size: ds.vocab.len(),
        ..base.clone()
    }
}

pub fn check_compatible(config: &ModelConfig, ds: &Dataset) -> Result<()> {
    let c = &ds.config;
    let mut problems = Vec::new();
    if (config.grid_h, config.grid_w) != (c.grid_h, c.grid_w) {
        problems.push(format!(
            "grid {}×{} vs dataset {}×{}",
            config.grid_h, config.grid_w, c.grid_h, c.grid_w
        ));
    }
    if config.d_visual != c.d_visual {
        problems.push(format!("d_visual {} vs dataset {}", config.d_visual, c.d_visual));
    }
    if config.vocab_size != ds.vocab.len() {
        problems.push(format!("vocab_size {} vs dataset vocabulary {}", config.vocab_size, ds.vocab.len()));
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Mismatch(format!("model does not fit dataset: {}", problems.join("; "))))
    }
}

fn predict_chunk(params: &ModelParams, chunk: &[Sample], with_reasoning: bool) -> Result<Vec<Prediction>> {
    let cfg = params.config();
    let refs: Vec<&Sample> = chunk.iter().collect();
    let mut tape = Tape::new();
    let mut b = Binder::frozen(params);
    let fwd = forward_batch(&mut tape, &mut b, &refs, Mode::Test)?;
    let alpha_r = if with_reasoning {
        Some(reasoning_attention(&mut tape, &mut b, &refs)?)
    } else {
        None
    };
    chunk
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let out = fwd.output(&tape, i, cfg)?;
            let predicted = argmax(out.y_q.data());
            let alpha_r = match alpha_r {
                Some(v) => Some(AttentionMap::new(crate::numcore::Tensor::new(
                    vec![cfg.grid_h, cfg.grid_w],
                    tape.value(v).row(i).to_vec(),
                )?)?),
                None => None,
            };
            Ok(Prediction {
                id: s.id,
                predicted,
                correct: predicted == s.correct_index,
                attn_on_target: out.alpha_q.mass_on(&s.target_cells),
                alpha_q: out.alpha_q,
                alpha_r,
            })
        })
        .collect()
}

/// Test-mode predictions for every sample, in input order. The reasoning
/// decoder runs separately, and only when every sample has a rationale.
pub fn predict(params: &ModelParams, samples: &[Sample]) -> Result<Vec<Prediction>> {
    let with_reasoning = samples.iter().all(|s| s.rationale.is_some());
    let chunks: Vec<Vec<Prediction>> = samples
        .par_chunks(EVAL_BATCH)
        .map(|c| predict_chunk(params, c, with_reasoning))
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Question-branch accuracy, attention on target cells, and `KL(α^Q‖α^R)`.
pub fn evaluate(params: &ModelParams, samples: &[Sample]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Input("cannot evaluate an empty split".into()));
    }
    let preds = predict(params, samples)?;
    let n = preds.len() as f64;
    let accuracy = preds.iter().filter(|p| p.correct).count() as f64 / n;
    let mean_attn_on_target = preds.iter().map(|p| p.attn_on_target).sum::<f64>() / n;
    let mean_kl_q_r = if preds.iter().all(|p| p.alpha_r.is_some()) {
        let mut total = 0.0;
        for p in &preds {
            total += forward_kl(&p.alpha_q, p.alpha_r.as_ref().expect("checked"))?;
        }
        Some(total / n)
    } else {
        None
    };
    Ok(EvalReport {
        accuracy,
        mean_attn_on_target,
        mean_kl_q_r,
        n_samples: preds.len(),
    })
}

/// Copy of `sample` with zero vectors at its target cells.
pub fn mask_referenced_objects(sample: &Sample) -> Sample {
    let mut masked = sample.clone();
    for &(r, c) in &sample.target_cells {
        masked.grid.cell_mut(r, c).fill(0.0);
    }
    masked
}

fn accuracy(params: &ModelParams, samples: &[Sample]) -> Result<f64> {
    let chunks: Vec<usize> = samples
        .par_chunks(EVAL_BATCH)
        .map(|chunk| -> Result<usize> {
            let refs: Vec<&Sample> = chunk.iter().collect();
            let mut tape = Tape::new();
            let mut b = Binder::frozen(params);
            let fwd = forward_batch(&mut tape, &mut b, &refs, Mode::Test)?;
            let y = tape.value(fwd.y_q);
            Ok(chunk
                .iter()
                .enumerate()
                .filter(|(i, s)| argmax(y.row(*i)) == s.correct_index)
                .count())
        })
        .collect::<Result<_>>()?;
    Ok(chunks.iter().sum::<usize>() as f64 / samples.len() as f64)
}

/// Accuracy on clean samples versus samples with their referenced
/// objects masked.
pub fn ablation(params: &ModelParams, samples: &[Sample]) -> Result<AblationReport> {
    if samples.is_empty() {
        return Err(Error::Input("cannot ablate an empty split".into()));
    }
    let masked: Vec<Sample> = samples.iter().map(mask_referenced_objects).collect();
    let accuracy_clean = accuracy(params, samples)?;
    let accuracy_masked = accuracy(params, &masked)?;
    Ok(AblationReport {
        accuracy_clean,
        accuracy_masked,
        drop: accuracy_clean - accuracy_masked,
    })
}

#[cfg(test)]
mod tests;
