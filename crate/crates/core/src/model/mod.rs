//! Language stream, two cross-attention visual decoders, attended pooling
//! and Hadamard-fusion answer scoring.

mod net;
mod params;

pub use net::{
    attended_representation, cross_attention_decode, encode_language, forward, forward_batch,
    fuse_and_score, reasoning_attention, BatchForward, ReasoningVars,
};
pub use params::{Binder, DecoderKind, GroupSet, Linear, ModelParams, Param, ParamGroup};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{argmax, Tensor};

/// Answers per question.
pub const N_CANDIDATES: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    /// Channel width of the feature grid.
    pub d_visual: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub n_candidates: usize,
    /// Hidden width of the feed-forward sublayers.
    pub d_ff: usize,
    pub ln_eps: f64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_visual: 32,
            grid_h: 8,
            grid_w: 8,
            vocab_size: 64,
            max_seq_len: 24,
            n_candidates: N_CANDIDATES,
            d_ff: 128,
            ln_eps: 1e-5,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_dec_layers", self.n_dec_layers),
            ("d_visual", self.d_visual),
            ("grid_h", self.grid_h),
            ("grid_w", self.grid_w),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("d_ff", self.d_ff),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Input(format!("model config: {name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Input(format!(
                "model config: d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_candidates != N_CANDIDATES {
            return Err(Error::Input(format!(
                "model config: n_candidates must be {N_CANDIDATES}, got {}",
                self.n_candidates
            )));
        }
        if !(self.ln_eps > 0.0) || !(self.init_std >= 0.0) {
            return Err(Error::Input("model config: ln_eps/init_std out of range".into()));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

/// An `h × w` grid of `d`-dimensional feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    features: Tensor,
}

impl FeatureGrid {
    pub fn new(features: Tensor) -> Result<Self> {
        if features.rank() != 3 {
            return Err(Error::Dimension(format!(
                "feature grid must be [h, w, d], got {:?}",
                features.shape()
            )));
        }
        if !features.is_finite() {
            return Err(Error::Numeric("feature grid has non-finite values".into()));
        }
        Ok(Self { features })
    }

    pub fn zeros(h: usize, w: usize, d: usize) -> Self {
        Self {
            features: Tensor::zeros(&[h, w, d]),
        }
    }

    pub fn h(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn w(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn d(&self) -> usize {
        self.features.shape()[2]
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let d = self.d();
        let off = (row * self.w() + col) * d;
        &self.features.data()[off..off + d]
    }

    pub fn cell_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let d = self.d();
        let off = (row * self.w() + col) * d;
        &mut self.features.data_mut()[off..off + d]
    }
}

/// Attention distribution over the cells of a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    weights: Tensor,
}

impl AttentionMap {
    pub const SUM_TOL: f64 = 1e-6;

    /// Validates that `weights` is an `[h, w]` distribution.
    pub fn new(weights: Tensor) -> Result<Self> {
        if weights.rank() != 2 {
            return Err(Error::Dimension(format!(
                "attention map must be [h, w], got {:?}",
                weights.shape()
            )));
        }
        if weights.data().iter().any(|&x| !(x >= 0.0)) {
            return Err(Error::Input("attention map has negative or NaN entries".into()));
        }
        if (weights.sum() - 1.0).abs() > Self::SUM_TOL {
            return Err(Error::Input(format!(
                "attention map sums to {}, not 1",
                weights.sum()
            )));
        }
        Ok(Self { weights })
    }

    pub fn uniform(h: usize, w: usize) -> Self {
        Self {
            weights: Tensor::filled(&[h, w], 1.0 / (h * w) as f64),
        }
    }

    pub fn one_hot(h: usize, w: usize, row: usize, col: usize) -> Self {
        let mut weights = Tensor::zeros(&[h, w]);
        weights.set(&[row, col], 1.0);
        Self { weights }
    }

    pub fn h(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn w(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.weights.get(&[row, col])
    }

    /// Cell with the largest weight; ties go to the first in row-major order.
    pub fn argmax_cell(&self) -> (usize, usize) {
        let i = argmax(self.weights.data());
        (i / self.w(), i % self.w())
    }

    /// Total weight on the given cells.
    pub fn mass_on(&self, cells: &[(usize, usize)]) -> f64 {
        cells.iter().map(|&(r, c)| self.at(r, c)).sum()
    }
}

/// Test mode evaluates only the question branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Test,
}

/// Reasoning-branch outputs, present only in train mode.
#[derive(Clone, Debug, PartialEq)]
pub struct ReasoningOutput {
    pub alpha_r: AttentionMap,
    pub v_r: Tensor,
    pub y_r: Tensor,
}

/// Single-sample model outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    /// Pooled language representation for each candidate, `[4, d_model]`.
    pub x_cls: Tensor,
    pub alpha_q: AttentionMap,
    pub v_q: Tensor,
    /// Distribution over the four candidates.
    pub y_q: Tensor,
    pub reasoning: Option<ReasoningOutput>,
}

#[cfg(test)]
mod tests;
