use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scene::{render_features, FeatureCodes, SceneObject, SceneSpec};
use super::{Color, Sample, Shape, Vocabulary};
use crate::error::{Error, Result};
use crate::model::N_CANDIDATES;

/// Generator settings recorded in the dataset manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub grid_h: usize,
    pub grid_w: usize,
    pub d_visual: usize,
    pub noise_sigma: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            grid_h: 8,
            grid_w: 8,
            d_visual: 32,
            noise_sigma: 0.1,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        // Rows and columns are spelled with single digits, and row
        // questions need three distinct wrong rows.
        for (name, v) in [("grid_h", self.grid_h), ("grid_w", self.grid_w)] {
            if !(4..=10).contains(&v) {
                return Err(Error::Input(format!("{name} must be in 4..=10, got {v}")));
            }
        }
        if self.d_visual == 0 {
            return Err(Error::Input("d_visual must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Input("noise_sigma must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Question templates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Template {
    /// "what color is the <shape>"
    ColorOfShape,
    /// "what shape is the <color> object"
    ShapeOfColor,
    /// "which row is the <color> <shape> in"
    RowOfObject,
}

impl Template {
    pub const ALL: [Template; 3] = [Template::ColorOfShape, Template::ShapeOfColor, Template::RowOfObject];

    /// Whether `o` is the only object in `scene` matching this template's query.
    fn identifies(self, scene: &SceneSpec, o: &SceneObject) -> bool {
        let matches = |p: &&SceneObject| match self {
            Template::ColorOfShape => p.shape == o.shape,
            Template::ShapeOfColor => p.color == o.color,
            Template::RowOfObject => p.shape == o.shape && p.color == o.color,
        };
        scene.objects.iter().filter(matches).count() == 1
    }

    fn question(self, o: &SceneObject) -> String {
        match self {
            Template::ColorOfShape => format!("what color is the {}", o.shape.word()),
            Template::ShapeOfColor => format!("what shape is the {} object", o.color.word()),
            Template::RowOfObject => format!("which row is the {} {} in", o.color.word(), o.shape.word()),
        }
    }

    /// Correct answer word and the full answer category.
    fn answers(self, o: &SceneObject, h: usize) -> (String, Vec<String>) {
        match self {
            Template::ColorOfShape => (
                o.color.word().into(),
                Color::ALL.iter().map(|c| c.word().into()).collect(),
            ),
            Template::ShapeOfColor => (
                o.shape.word().into(),
                Shape::ALL.iter().map(|s| s.word().into()).collect(),
            ),
            Template::RowOfObject => (o.row.to_string(), (0..h).map(|r| r.to_string()).collect()),
        }
    }
}

fn rationale(o: &SceneObject) -> String {
    format!(
        "the {} {} is at row {} col {}",
        o.color.word(),
        o.shape.word(),
        o.row,
        o.col
    )
}

/// Splitmix64 finaliser combining a seed with a stream index.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Builds one sample asking `template` about `scene`.
///
/// Fails with an input error when no object is uniquely identified by the
/// template; callers retry with a fresh scene.
pub fn generate_sample<R: Rng + ?Sized>(
    id: u64,
    scene: &SceneSpec,
    template: Template,
    vocab: &Vocabulary,
    codes: &FeatureCodes,
    rng: &mut R,
) -> Result<Sample> {
    scene.validate()?;
    let eligible: Vec<&SceneObject> = scene
        .objects
        .iter()
        .filter(|o| template.identifies(scene, o))
        .collect();
    if eligible.is_empty() {
        return Err(Error::Input(format!("scene is ambiguous for {template:?}")));
    }
    let target = *eligible[rng.random_range(0..eligible.len())];

    let (correct, category) = template.answers(&target, scene.h);
    let mut distractors: Vec<&String> = category.iter().filter(|a| **a != correct).collect();
    distractors.shuffle(rng);
    distractors.truncate(N_CANDIDATES - 1);

    let correct_index = rng.random_range(0..N_CANDIDATES);
    let mut wrong = distractors.into_iter();
    let candidates = (0..N_CANDIDATES)
        .map(|i| {
            let word = if i == correct_index {
                &correct
            } else {
                wrong.next().expect("three distractors")
            };
            vocab.encode(word)
        })
        .collect::<Result<Vec<_>>>()?;

    let grid = render_features(scene, codes, rng.random())?;
    Ok(Sample {
        id,
        scene: scene.clone(),
        grid,
        question: vocab.encode(&template.question(&target))?,
        candidates,
        correct_index,
        rationale: Some(vocab.encode(&rationale(&target))?),
        target_cells: vec![(target.row, target.col)],
    })
}

/// Sample `id` of a dataset: a pure function of `(config, seed, id)`.
pub fn generate_indexed(
    id: u64,
    config: &GenConfig,
    seed: u64,
    vocab: &Vocabulary,
    codes: &FeatureCodes,
) -> Result<Sample> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, id));
    let template = Template::ALL[rng.random_range(0..Template::ALL.len())];
    loop {
        let scene = SceneSpec::random(config.grid_h, config.grid_w, config.noise_sigma, &mut rng);
        match generate_sample(id, &scene, template, vocab, codes, &mut rng) {
            Ok(s) => return Ok(s),
            Err(Error::Input(_)) => continue,
            Err(e) => return Err(e),
        }
    }
}

/// Feature codes for a dataset seed.
pub fn dataset_codes(config: &GenConfig, seed: u64) -> FeatureCodes {
    FeatureCodes::random(config.d_visual, derive_seed(seed, u64::MAX))
}
