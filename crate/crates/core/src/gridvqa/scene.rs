use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::FeatureGrid;
use crate::numcore::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Star,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Star];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Star => "star",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub row: usize,
    pub col: usize,
    pub shape: Shape,
    pub color: Color,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<SceneObject>,
    pub h: usize,
    pub w: usize,
    #[serde(skip)]
    pub noise_sigma: f64,
}

pub const MIN_OBJECTS: usize = 2;
pub const MAX_OBJECTS: usize = 5;

impl SceneSpec {
    /// Checks cell bounds, distinct cells and the object-count range.
    pub fn validate(&self) -> Result<()> {
        if !(MIN_OBJECTS..=MAX_OBJECTS).contains(&self.objects.len()) {
            return Err(Error::Input(format!(
                "scene has {} objects, expected {MIN_OBJECTS}..={MAX_OBJECTS}",
                self.objects.len()
            )));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if o.row >= self.h || o.col >= self.w {
                return Err(Error::Input(format!(
                    "object at ({}, {}) outside {}×{} grid",
                    o.row, o.col, self.h, self.w
                )));
            }
            if self.objects[..i].iter().any(|p| (p.row, p.col) == (o.row, o.col)) {
                return Err(Error::Input(format!("two objects share cell ({}, {})", o.row, o.col)));
            }
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Input("noise_sigma must be non-negative".into()));
        }
        Ok(())
    }

    /// Random scene with `MIN_OBJECTS..=MAX_OBJECTS` objects in distinct cells.
    pub fn random<R: Rng + ?Sized>(h: usize, w: usize, noise_sigma: f64, rng: &mut R) -> Self {
        let n = rng.random_range(MIN_OBJECTS..=MAX_OBJECTS).min(h * w);
        let cells = rand::seq::index::sample(rng, h * w, n);
        let objects = cells
            .iter()
            .map(|c| SceneObject {
                row: c / w,
                col: c % w,
                shape: Shape::ALL[rng.random_range(0..4)],
                color: Color::ALL[rng.random_range(0..4)],
            })
            .collect();
        Self {
            objects,
            h,
            w,
            noise_sigma,
        }
    }
}

/// Fixed random unit vectors for every shape and color.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureCodes {
    /// `[4, d]`, indexed by [`Shape::index`].
    pub shape: Tensor,
    /// `[4, d]`, indexed by [`Color::index`].
    pub color: Tensor,
}

impl FeatureCodes {
    pub fn random(d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut unit_rows = || {
            let mut t = Tensor::from_fn(&[4, d], |_| StandardNormal.sample(&mut rng));
            for row in t.data_mut().chunks_exact_mut(d) {
                let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                row.iter_mut().for_each(|x| *x /= norm);
            }
            t
        };
        let shape = unit_rows();
        let color = unit_rows();
        Self { shape, color }
    }

    pub fn d(&self) -> usize {
        self.shape.last_dim()
    }
}

/// Object cells get `code(shape) + code(color) + noise`, empty cells noise
/// only. Noise is `N(0, noise_sigma²)` drawn from `seed`.
pub fn render_features(scene: &SceneSpec, codes: &FeatureCodes, seed: u64) -> Result<FeatureGrid> {
    scene.validate()?;
    let d = codes.d();
    let mut grid = FeatureGrid::zeros(scene.h, scene.w, d);
    for o in &scene.objects {
        let cell = grid.cell_mut(o.row, o.col);
        let s = codes.shape.row(o.shape.index());
        let c = codes.color.row(o.color.index());
        for ((x, a), b) in cell.iter_mut().zip(s).zip(c) {
            *x = a + b;
        }
    }
    if scene.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut features = grid.features().clone();
        for x in features.data_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *x += scene.noise_sigma * z;
        }
        grid = FeatureGrid::new(features)?;
    }
    Ok(grid)
}
