//! Detector contract, NMS, and the two shipped detectors.
//!
//! The engine only needs two things from a detector: retrain on the labeled
//! pool, and for any image return first-stage region proposals (box plus
//! objectness score) and final detections. [`SyntheticDetector`] simulates a
//! learning detector for desk-scale runs; [`ExternalDetector`] talks to a real
//! one over newline-delimited JSON.

mod synthetic;
mod wire;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::ImageRecord;
use crate::geometry::BoundingBox;

pub use synthetic::{skill_for, SyntheticDetector, SyntheticDetectorParams};
pub use wire::{serve_detector, ExternalDetector, WireRequest, WireResponse};

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("cannot train on an empty labeled set")]
    EmptyTrainingSet,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("detector protocol error: {0}")]
    Protocol(String),
    #[error("detector reported an error: {0}")]
    Remote(String),
    #[error("detector io error: {0}")]
    Io(#[from] std::io::Error),
}

/// A box with a probability-like score in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawScored")]
pub struct ScoredBox {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub score: f64,
}

/// First-stage output: a candidate box with its objectness score.
pub type RegionProposal = ScoredBox;
/// Final post-processed detection.
pub type Detection = ScoredBox;

#[derive(Deserialize)]
struct RawScored {
    #[serde(rename = "box")]
    bbox: BoundingBox,
    score: f64,
}

impl TryFrom<RawScored> for ScoredBox {
    type Error = String;

    fn try_from(raw: RawScored) -> Result<Self, Self::Error> {
        ScoredBox::new(raw.bbox, raw.score).ok_or_else(|| format!("score {} outside [0,1]", raw.score))
    }
}

impl ScoredBox {
    pub fn new(bbox: BoundingBox, score: f64) -> Option<Self> {
        (0.0..=1.0).contains(&score).then_some(Self { bbox, score })
    }

    /// Score descending, then box position ascending.
    fn rank_cmp(&self, other: &Self) -> std::cmp::Ordering {
        other
            .score
            .total_cmp(&self.score)
            .then_with(|| self.bbox.cmp_position(&other.bbox))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorOutput {
    pub image_id: String,
    pub proposals: Vec<RegionProposal>,
    pub detections: Vec<Detection>,
}

/// Opaque handle to a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub model_id: String,
    /// Training round: 0 for the initial model, then one per episode.
    pub round: u32,
    pub trained_on: usize,
    /// Synthetic detectors only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skill: Option<f64>,
}

/// An image with the strong labels it is trained on.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LabeledImage<'a> {
    pub image: &'a ImageRecord,
    pub boxes: &'a [BoundingBox],
}

/// The engine's view of an object detector.
///
/// `detect` must not mutate model state and may be called concurrently;
/// the engine never calls `detect` while `train` is running.
pub trait Detector: Send + Sync {
    fn train(&self, labeled: &[LabeledImage<'_>], round: u32) -> Result<ModelState, DetectorError>;

    fn detect(&self, model: &ModelState, image: &ImageRecord) -> Result<DetectorOutput, DetectorError>;
}

impl<D: Detector + ?Sized> Detector for std::sync::Arc<D> {
    fn train(&self, labeled: &[LabeledImage<'_>], round: u32) -> Result<ModelState, DetectorError> {
        (**self).train(labeled, round)
    }

    fn detect(&self, model: &ModelState, image: &ImageRecord) -> Result<DetectorOutput, DetectorError> {
        (**self).detect(model, image)
    }
}

/// Greedy non-maximum suppression.
///
/// Repeatedly keeps the best remaining proposal (score descending, ties by
/// `x_min`, `y_min`, `x_max`, `y_max` ascending) and suppresses every
/// remaining proposal whose IoU with it exceeds `iou_threshold`.
pub fn nms(proposals: &[RegionProposal], iou_threshold: f64) -> Result<Vec<Detection>, DetectorError> {
    if !(iou_threshold > 0.0 && iou_threshold < 1.0) {
        return Err(DetectorError::InvalidParameter(format!(
            "nms iou threshold must be in (0,1), got {iou_threshold}"
        )));
    }
    let mut order: Vec<&RegionProposal> = proposals.iter().collect();
    order.sort_by(|a, b| a.rank_cmp(b));
    let mut suppressed = vec![false; order.len()];
    let mut kept = Vec::new();
    for i in 0..order.len() {
        if suppressed[i] {
            continue;
        }
        kept.push(*order[i]);
        for j in i + 1..order.len() {
            if !suppressed[j] && order[i].bbox.iou(&order[j].bbox) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    Ok(kept)
}
