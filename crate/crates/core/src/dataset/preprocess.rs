//! Annotation-level downsampling and no-overlap tile slicing.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{DatasetError, DatasetManifest, ImageRecord};
use crate::geometry::BoundingBox;

/// What to do with objects cut by a tile border.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartialPolicy {
    /// Discard a tile that contains any cut object, or no object at all.
    DropImage,
    /// Discard cut objects; keep the tile if at least one whole object remains.
    DropObject,
}

impl std::str::FromStr for PartialPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "drop_image" | "drop-image" => Ok(Self::DropImage),
            "drop_object" | "drop-object" => Ok(Self::DropObject),
            other => Err(format!(
                "unknown partial policy `{other}` (expected drop_image or drop_object)"
            )),
        }
    }
}

/// Divides every dimension and coordinate by `factor`.
pub fn downsample(m: &DatasetManifest, factor: f64) -> Result<DatasetManifest, DatasetError> {
    if !(factor.is_finite() && factor > 0.0) {
        return Err(DatasetError::InvalidParameter(format!(
            "downsample factor must be positive and finite, got {factor}"
        )));
    }
    let mut images = Vec::with_capacity(m.images.len());
    for img in &m.images {
        let objects = img
            .objects
            .iter()
            .map(|b| b.scaled_down(factor))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| DatasetError::Validation {
                image_id: img.id.clone(),
                reason: e.to_string(),
            })?;
        images.push(ImageRecord {
            width: img.width / factor,
            height: img.height / factor,
            objects,
            ..img.clone()
        });
    }
    Ok(DatasetManifest { images, ..m.clone() })
}

/// Cuts every image into a fixed grid of `tile_w x tile_h` tiles with no
/// overlap. Trailing strips narrower than a tile are discarded. An object
/// belongs to a tile only when it lies entirely inside it; objects cut by a
/// tile border are handled per `policy`. Tile ids are `<image id>_r<row>_c<col>`.
pub fn slice_tiles(
    m: &DatasetManifest,
    tile_w: f64,
    tile_h: f64,
    policy: PartialPolicy,
) -> Result<DatasetManifest, DatasetError> {
    if !(tile_w.is_finite() && tile_w > 0.0 && tile_h.is_finite() && tile_h > 0.0) {
        return Err(DatasetError::InvalidParameter(format!(
            "tile dimensions must be positive, got {tile_w}x{tile_h}"
        )));
    }
    let mut images = Vec::new();
    let mut ids: HashSet<String> = HashSet::new();
    for img in &m.images {
        let cols = (img.width / tile_w).floor() as usize;
        let rows = (img.height / tile_h).floor() as usize;
        for row in 0..rows {
            for col in 0..cols {
                let (x0, y0) = (col as f64 * tile_w, row as f64 * tile_h);
                let tile = BoundingBox::new(x0, y0, x0 + tile_w, y0 + tile_h).expect("tile rectangle is valid");
                let mut kept = Vec::new();
                let mut cut = false;
                for b in &img.objects {
                    if b.is_inside(&tile) {
                        let local = b.shifted(x0, y0).map_err(|e| DatasetError::Validation {
                            image_id: img.id.clone(),
                            reason: e.to_string(),
                        })?;
                        kept.push(local);
                    } else if b.intersection_area(&tile) > 0.0 {
                        cut = true;
                    }
                }
                let keep_tile = match policy {
                    PartialPolicy::DropImage => !cut && !kept.is_empty(),
                    PartialPolicy::DropObject => !kept.is_empty(),
                };
                if !keep_tile {
                    continue;
                }
                let id = format!("{}_r{}_c{}", img.id, row, col);
                if !ids.insert(id.clone()) {
                    return Err(DatasetError::Validation {
                        image_id: id,
                        reason: "tile id collides with another tile".into(),
                    });
                }
                images.push(ImageRecord {
                    id,
                    width: tile_w,
                    height: tile_h,
                    difficulty: img.difficulty,
                    image_uri: img.image_uri.clone(),
                    objects: kept,
                });
            }
        }
    }
    if images.is_empty() {
        return Err(DatasetError::Empty);
    }
    Ok(DatasetManifest { images, ..m.clone() })
}
