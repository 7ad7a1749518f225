use rand::Rng as _;

use crate::error::{Error, Result};
use crate::init;
use crate::model::Architecture;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectKind {
    Square,
    Disc,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneObject {
    pub kind: ObjectKind,
    /// `(x, y)` in pixels; pixel `(i, j)` has its centre at `(j + 0.5, i + 0.5)`.
    pub center: (f64, f64),
    /// Half side for squares.
    pub radius: f64,
    /// Pyramid level whose mask carries the object.
    pub level: usize,
}

impl SceneObject {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        match self.kind {
            ObjectKind::Square => dx.abs() <= self.radius && dy.abs() <= self.radius,
            ObjectKind::Disc => dx * dx + dy * dy <= self.radius * self.radius,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    /// `(1, c, size, size)`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    /// One `{0, 1}` mask per level, `(1, 1, size / 2^(i+2), size / 2^(i+2))`.
    pub masks: Vec<Tensor<f32>>,
    pub objects: Vec<SceneObject>,
}

impl SyntheticScene {
    /// Fraction of mask cells set, averaged over levels.
    pub fn coverage(&self) -> f64 {
        let per: f64 = self
            .masks
            .iter()
            .map(|m| m.sum() as f64 / m.len() as f64)
            .sum();
        per / self.masks.len() as f64
    }
}

const MAX_OBJECTS: usize = 4;
const BACKGROUND: f32 = 0.3;
const FOREGROUND: (f32, f32) = (0.6, 1.0);

/// Side lengths of the per-level masks: the backbone's stage resolutions.
pub fn mask_sizes(size: usize, levels: usize) -> Vec<usize> {
    (0..levels).map(|i| size >> (i + 2)).collect()
}

/// Radius bin `[lo, hi)` of a level. Bins double per level, starting at
/// `3 * size / 64`, so an object spans 1.5 to 3 cells of its level.
fn radius_bin(size: usize, level: usize) -> (f64, f64) {
    let lo = 3.0 * size as f64 / 64.0 * (1 << level) as f64;
    (lo, 2.0 * lo)
}

/// `n` scenes of `size x size` pixels for a model with `arch`'s input channels
/// and pyramid depth. Deterministic in `seed`.
pub fn gen_dataset(seed: u64, n: usize, size: usize, arch: &Architecture) -> Result<Vec<SyntheticScene>> {
    let levels = arch.levels();
    let multiple = arch.backbone().max_stride();
    if n == 0 {
        return Err(Error::Config("dataset_size must be at least 1".into()));
    }
    if levels == 0 || size == 0 || !size.is_multiple_of(multiple) {
        return Err(Error::Config(format!(
            "image_size must be a positive multiple of {multiple}, got {size}"
        )));
    }
    let mut rng = init::rng(seed);
    Ok((0..n)
        .map(|_| scene(&mut rng, size, levels, arch.in_channels))
        .collect())
}

fn scene(rng: &mut init::Rng, size: usize, levels: usize, channels: usize) -> SyntheticScene {
    let count = rng.random_range(1..=MAX_OBJECTS);
    let objects: Vec<SceneObject> = (0..count)
        .map(|_| {
            let level = rng.random_range(0..levels);
            let (lo, hi) = radius_bin(size, level);
            SceneObject {
                kind: if rng.random_bool(0.5) {
                    ObjectKind::Square
                } else {
                    ObjectKind::Disc
                },
                center: (
                    rng.random_range(0.0..size as f64),
                    rng.random_range(0.0..size as f64),
                ),
                radius: rng.random_range(lo..hi),
                level,
            }
        })
        .collect();
    let colours: Vec<Vec<f32>> = objects
        .iter()
        .map(|_| {
            (0..channels)
                .map(|_| rng.random_range(FOREGROUND.0..=FOREGROUND.1))
                .collect()
        })
        .collect();

    let mut image = Tensor::zeros([1, channels, size, size]);
    for c in 0..channels {
        for i in 0..size {
            for j in 0..size {
                let (x, y) = (j as f64 + 0.5, i as f64 + 0.5);
                let mut v = rng.random_range(0.0..=BACKGROUND);
                for (o, col) in objects.iter().zip(&colours) {
                    if o.contains(x, y) {
                        v = v.max(col[c]);
                    }
                }
                image.set(0, c, i, j, v);
            }
        }
    }

    let masks = mask_sizes(size, levels)
        .into_iter()
        .enumerate()
        .map(|(level, side)| {
            let cell = (size / side) as f64;
            let mut m = Tensor::zeros([1, 1, side, side]);
            for o in objects.iter().filter(|o| o.level == level) {
                for i in 0..side {
                    for j in 0..side {
                        if o.contains((j as f64 + 0.5) * cell, (i as f64 + 0.5) * cell) {
                            m.set(0, 0, i, j, 1.0);
                        }
                    }
                }
                // the cell holding the centre is always marked, so no object
                // is lost between cell centres
                let (ci, cj) = ((o.center.1 / cell) as usize, (o.center.0 / cell) as usize);
                m.set(0, 0, ci.min(side - 1), cj.min(side - 1), 1.0);
            }
            m
        })
        .collect();

    SyntheticScene {
        image,
        masks,
        objects,
    }
}
