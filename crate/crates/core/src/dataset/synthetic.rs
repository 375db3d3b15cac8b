//! Seeded synthetic datasets for desk-scale experiments.

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use super::{DatasetError, DatasetManifest, ImageRecord};
use crate::geometry::BoundingBox;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DifficultyDistribution {
    Constant { value: f64 },
    Uniform { low: f64, high: f64 },
    Beta { a: f64, b: f64 },
}

impl Default for DifficultyDistribution {
    fn default() -> Self {
        DifficultyDistribution::Beta { a: 2.0, b: 5.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub name: String,
    pub images: usize,
    pub width: f64,
    pub height: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Minimum distance between the centers of two objects in one image.
    pub min_separation: f64,
    /// Side lengths are drawn uniformly from `[box_min, box_max]`, per axis.
    pub box_min: f64,
    pub box_max: f64,
    pub difficulty: DifficultyDistribution,
    /// Placement retries per object before giving up.
    pub max_attempts: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            images: 200,
            width: 500.0,
            height: 500.0,
            min_objects: 2,
            max_objects: 8,
            min_separation: 40.0,
            box_min: 30.0,
            box_max: 70.0,
            difficulty: DifficultyDistribution::default(),
            max_attempts: 1000,
        }
    }
}

impl SyntheticConfig {
    fn check(&self) -> Result<(), DatasetError> {
        let bad = |msg: String| Err(DatasetError::InvalidParameter(msg));
        if self.images == 0 {
            return bad("synthetic dataset needs at least one image".into());
        }
        if !(self.width > 0.0 && self.height > 0.0 && self.width.is_finite() && self.height.is_finite()) {
            return bad(format!("invalid image size {}x{}", self.width, self.height));
        }
        if self.min_objects > self.max_objects {
            return bad(format!(
                "min_objects {} > max_objects {}",
                self.min_objects, self.max_objects
            ));
        }
        if !(self.box_min > 0.0 && self.box_min <= self.box_max) {
            return bad(format!("invalid box size range [{}, {}]", self.box_min, self.box_max));
        }
        if self.box_max > self.width || self.box_max > self.height {
            return bad("box_max exceeds image size".into());
        }
        if !(self.min_separation >= 0.0 && self.min_separation.is_finite()) {
            return bad(format!("invalid min_separation {}", self.min_separation));
        }
        match self.difficulty {
            DifficultyDistribution::Constant { value } if !(0.0..=1.0).contains(&value) => {
                bad(format!("constant difficulty {value} outside [0,1]"))
            }
            DifficultyDistribution::Uniform { low, high } if !(0.0 <= low && low <= high && high <= 1.0) => {
                bad(format!("uniform difficulty range [{low}, {high}] invalid"))
            }
            DifficultyDistribution::Beta { a, b } if !(a > 0.0 && b > 0.0) => {
                bad(format!("beta parameters must be positive, got a={a} b={b}"))
            }
            _ => Ok(()),
        }
    }
}

/// Generates a dataset deterministically from `seed`. Each image draws its
/// object count, box sizes, positions, and difficulty from its own stream.
pub fn generate_synthetic(config: &SyntheticConfig, seed: u64) -> Result<DatasetManifest, DatasetError> {
    config.check()?;
    let mut images = Vec::with_capacity(config.images);
    for index in 0..config.images {
        let mut rng = seed::stream(seed, "synthetic-image", &config.name, index as u64);
        let difficulty = match config.difficulty {
            DifficultyDistribution::Constant { value } => value,
            DifficultyDistribution::Uniform { low, high } => {
                if low == high {
                    low
                } else {
                    rng.random_range(low..=high)
                }
            }
            DifficultyDistribution::Beta { a, b } => Beta::new(a, b).expect("checked parameters").sample(&mut rng),
        }
        .clamp(0.0, 1.0);
        let count = rng.random_range(config.min_objects..=config.max_objects);
        let mut objects: Vec<BoundingBox> = Vec::with_capacity(count);
        for _ in 0..count {
            let mut placed = false;
            for _ in 0..config.max_attempts {
                let w = rng.random_range(config.box_min..=config.box_max);
                let h = rng.random_range(config.box_min..=config.box_max);
                let cx = rng.random_range(w / 2.0..=config.width - w / 2.0);
                let cy = rng.random_range(h / 2.0..=config.height - h / 2.0);
                let Ok(candidate) = BoundingBox::from_center(cx, cy, w, h) else {
                    continue;
                };
                if !candidate.within_image(config.width, config.height) {
                    continue;
                }
                let c = candidate.center();
                if objects.iter().all(|o| o.center().distance(&c) >= config.min_separation) {
                    objects.push(candidate);
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(DatasetError::InfeasiblePacking {
                    image_index: index,
                    requested: count,
                    separation: config.min_separation,
                    attempts: config.max_attempts,
                });
            }
        }
        images.push(ImageRecord {
            id: format!("{}-{:05}", config.name, index),
            width: config.width,
            height: config.height,
            difficulty,
            image_uri: None,
            objects,
        });
    }
    let manifest = DatasetManifest {
        name: config.name.clone(),
        class_names: vec!["panicle".into()],
        images,
    };
    manifest.validate()?;
    Ok(manifest)
}
