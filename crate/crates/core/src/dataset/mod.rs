//! Dataset manifests, preprocessing, statistics, and synthetic generation.

mod preprocess;
mod stats;
mod synthetic;

use std::collections::HashSet;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::BoundingBox;

pub use preprocess::{downsample, slice_tiles, PartialPolicy};
pub use stats::{
    compute_stats, percentile, round_sig_figs, tune_rpf_params, DatasetStats, Rounding, RpfParams, TuneOptions,
};
pub use synthetic::{generate_synthetic, DifficultyDistribution, SyntheticConfig};

/// The only manifest format version this crate reads and writes.
pub const MANIFEST_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("malformed manifest: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("unsupported manifest format_version {0} (expected {MANIFEST_FORMAT_VERSION})")]
    UnsupportedVersion(u32),
    #[error("image {image_id}: {reason}")]
    Validation { image_id: String, reason: String },
    #[error("manifest contains no images")]
    Empty,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("no image has two or more objects; minimum-distance statistics are empty")]
    NoDistances,
    #[error("no boxes in dataset; area statistics are empty")]
    NoAreas,
    #[error("cannot place {requested} objects with separation {separation} in image {image_index} after {attempts} attempts")]
    InfeasiblePacking {
        image_index: usize,
        requested: usize,
        separation: f64,
        attempts: usize,
    },
}

/// One image and its single-class ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub width: f64,
    pub height: f64,
    #[serde(default)]
    pub difficulty: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_uri: Option<String>,
    pub objects: Vec<BoundingBox>,
}

impl ImageRecord {
    fn invalid(&self, reason: impl Into<String>) -> DatasetError {
        DatasetError::Validation {
            image_id: self.id.clone(),
            reason: reason.into(),
        }
    }

    /// Checks dimensions, difficulty, and that every box lies inside the image.
    pub fn validate(&self) -> Result<(), DatasetError> {
        if !(self.width.is_finite() && self.width > 0.0 && self.height.is_finite() && self.height > 0.0) {
            return Err(self.invalid(format!(
                "dimensions must be positive and finite, got {}x{}",
                self.width, self.height
            )));
        }
        if !(0.0..=1.0).contains(&self.difficulty) {
            return Err(self.invalid(format!("difficulty {} outside [0,1]", self.difficulty)));
        }
        for (i, b) in self.objects.iter().enumerate() {
            if !b.within_image(self.width, self.height) {
                return Err(self.invalid(format!(
                    "object {i} {b:?} extends outside the {}x{} image",
                    self.width, self.height
                )));
            }
        }
        Ok(())
    }

    /// A copy with every object removed.
    pub fn without_objects(&self) -> ImageRecord {
        ImageRecord {
            objects: Vec::new(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub class_names: Vec<String>,
    pub images: Vec<ImageRecord>,
}

#[derive(Serialize, Deserialize)]
struct ManifestFile {
    format_version: u32,
    #[serde(flatten)]
    manifest: DatasetManifest,
}

#[derive(Serialize)]
struct ManifestFileRef<'a> {
    format_version: u32,
    #[serde(flatten)]
    manifest: &'a DatasetManifest,
}

/// How `load_manifest_with` treats boxes that leave the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LoadMode {
    /// Reject the manifest, naming the image.
    #[default]
    Strict,
    /// Clip boxes to the image; drop any that vanish.
    Clip,
}

impl DatasetManifest {
    /// Validates the manifest-level invariants: non-empty, unique ids, valid records.
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.images.is_empty() {
            return Err(DatasetError::Empty);
        }
        let mut seen = HashSet::with_capacity(self.images.len());
        for img in &self.images {
            if !seen.insert(img.id.as_str()) {
                return Err(img.invalid("duplicate image id"));
            }
            img.validate()?;
        }
        Ok(())
    }

    pub fn total_objects(&self) -> usize {
        self.images.iter().map(|i| i.objects.len()).sum()
    }

    pub fn get(&self, id: &str) -> Option<&ImageRecord> {
        self.images.iter().find(|i| i.id == id)
    }

    /// Hex SHA-256 of the canonical JSON serialization.
    pub fn content_hash(&self) -> String {
        let value = serde_json::to_value(ManifestFileRef {
            format_version: MANIFEST_FORMAT_VERSION,
            manifest: self,
        })
        .expect("manifest serializes");
        let bytes = serde_json::to_vec(&value).expect("value serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// Reads and strictly validates a manifest document.
pub fn load_manifest<R: Read>(source: R) -> Result<DatasetManifest, DatasetError> {
    load_manifest_with(source, LoadMode::Strict)
}

pub fn load_manifest_with<R: Read>(source: R, mode: LoadMode) -> Result<DatasetManifest, DatasetError> {
    let file: ManifestFile = serde_json::from_reader(source)?;
    if file.format_version != MANIFEST_FORMAT_VERSION {
        return Err(DatasetError::UnsupportedVersion(file.format_version));
    }
    let mut manifest = file.manifest;
    if mode == LoadMode::Clip {
        for img in &mut manifest.images {
            let (w, h) = (img.width, img.height);
            if w > 0.0 && h > 0.0 {
                img.objects = img.objects.iter().filter_map(|b| b.clipped(w, h)).collect();
            }
        }
    }
    manifest.validate()?;
    Ok(manifest)
}

pub fn write_manifest<W: Write>(manifest: &DatasetManifest, mut sink: W) -> Result<(), DatasetError> {
    serde_json::to_writer_pretty(
        &mut sink,
        &ManifestFileRef {
            format_version: MANIFEST_FORMAT_VERSION,
            manifest,
        },
    )?;
    sink.write_all(b"\n")?;
    Ok(())
}
