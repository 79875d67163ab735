//! Synthetic grid benchmark: scenes of colored shapes, templated
//! questions with four candidates, location-bearing rationales, and the
//! on-disk dataset format.

mod generate;
mod io;
mod scene;
mod vocab;

pub use generate::{dataset_codes, derive_seed, generate_indexed, generate_sample, GenConfig, Template};
pub use io::{file_crc, load_dataset, DatasetManifest, DATASET_FORMAT_VERSION};
pub use scene::{render_features, Color, FeatureCodes, SceneObject, SceneSpec, Shape, MAX_OBJECTS, MIN_OBJECTS};
pub use vocab::{Vocabulary, CLS_ID, PAD_ID, SEP_ID};

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::FeatureGrid;

/// One multiple-choice instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub scene: SceneSpec,
    pub grid: FeatureGrid,
    pub question: Vec<u32>,
    pub candidates: Vec<Vec<u32>>,
    pub correct_index: usize,
    /// Justification of the correct answer; only used during training.
    pub rationale: Option<Vec<u32>>,
    /// Cells the question and rationale refer to.
    pub target_cells: Vec<(usize, usize)>,
}

impl Sample {
    /// Every token id used by the sample.
    pub fn token_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.question
            .iter()
            .chain(self.candidates.iter().flatten())
            .chain(self.rationale.iter().flatten())
            .copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::Input(format!("unknown split {other:?}; use train or val"))),
        }
    }
}

/// A generated or loaded dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub config: GenConfig,
    pub vocab: Vocabulary,
    pub codes: FeatureCodes,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

impl Dataset {
    /// Generates both splits. Train ids are `0..n_train`, val ids follow.
    pub fn generate(n_train: usize, n_val: usize, config: &GenConfig, seed: u64) -> Result<Self> {
        if n_train == 0 || n_val == 0 {
            return Err(Error::Input("split sizes must be at least 1".into()));
        }
        config.validate()?;
        let vocab = Vocabulary::standard();
        let codes = dataset_codes(config, seed);
        let make = |ids: std::ops::Range<u64>| -> Result<Vec<Sample>> {
            ids.into_par_iter()
                .map(|id| generate_indexed(id, config, seed, &vocab, &codes))
                .collect()
        };
        let train = make(0..n_train as u64)?;
        let val = make(n_train as u64..(n_train + n_val) as u64)?;
        Ok(Self {
            seed,
            config: config.clone(),
            vocab,
            codes,
            train,
            val,
        })
    }

    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<DatasetManifest> {
        io::write_dataset(self, dir)
    }
}

/// Generates a dataset and writes it to `dir`.
pub fn generate_dataset(
    n_train: usize,
    n_val: usize,
    config: &GenConfig,
    seed: u64,
    dir: &Path,
) -> Result<(Dataset, DatasetManifest)> {
    let ds = Dataset::generate(n_train, n_val, config, seed)?;
    let manifest = ds.write(dir)?;
    Ok((ds, manifest))
}
