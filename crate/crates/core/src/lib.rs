//! Attention distillation from reasoning supervision: a small
//! transformer VQA model, its two-stage training schedule, a synthetic
//! grid benchmark and the evaluation and heatmap tools around them.

pub mod container;
pub mod error;
pub mod evalviz;
pub mod gridvqa;
pub mod losses;
pub mod model;
pub mod numcore;
pub mod selfcheck;
pub mod trainloop;

pub use error::{Error, Result};
pub use evalviz::{AblationReport, EvalReport};
pub use gridvqa::{Dataset, DatasetManifest, GenConfig, Sample, Split};
pub use model::{AttentionMap, FeatureGrid, ModelConfig, ModelParams};
pub use numcore::Tensor;
pub use trainloop::{MetricRecord, TrainConfig, TrainState};
