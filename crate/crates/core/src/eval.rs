//! Detection matching, AP@0.5, density metrics, and learning curves.

use std::cmp::Ordering;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::ImageRecord;
use crate::detector::{Detection, Detector, DetectorError, ModelState};
use crate::engine::EpisodeLog;
use crate::geometry::BoundingBox;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least {0} values")]
    TooFew(usize),
    #[error("correlation undefined: a vector is constant")]
    UndefinedCorrelation,
    #[error("iou threshold must be in (0,1), got {0}")]
    InvalidThreshold(f64),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Outcome for one detection, in processing order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionMatch {
    pub score: f64,
    /// Index into the ground-truth list when the detection is a true positive.
    pub matched_gt: Option<usize>,
}

impl DetectionMatch {
    pub fn is_tp(&self) -> bool {
        self.matched_gt.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub detections: Vec<DetectionMatch>,
    pub gt_matched: Vec<bool>,
}

impl MatchResult {
    pub fn true_positives(&self) -> usize {
        self.detections.iter().filter(|d| d.is_tp()).count()
    }

    pub fn false_positives(&self) -> usize {
        self.detections.len() - self.true_positives()
    }

    pub fn false_negatives(&self) -> usize {
        self.gt_matched.iter().filter(|m| !**m).count()
    }
}

/// Greedy one-to-one matching. Detections are taken by descending score
/// (ties by position); each claims the unmatched ground-truth box it overlaps
/// most, provided that IoU is strictly greater than `iou_threshold`.
pub fn match_detections(dets: &[Detection], gts: &[BoundingBox], iou_threshold: f64) -> Result<MatchResult, EvalError> {
    if !(iou_threshold > 0.0 && iou_threshold < 1.0) {
        return Err(EvalError::InvalidThreshold(iou_threshold));
    }
    let mut order: Vec<&Detection> = dets.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.bbox.cmp_position(&b.bbox)));
    let mut gt_matched = vec![false; gts.len()];
    let mut out = Vec::with_capacity(order.len());
    for d in order {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if gt_matched[j] {
                continue;
            }
            let iou = d.bbox.iou(g);
            if iou > iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, _)) = best {
            gt_matched[j] = true;
        }
        out.push(DetectionMatch {
            score: d.score,
            matched_gt: best.map(|(j, _)| j),
        });
    }
    Ok(MatchResult {
        detections: out,
        gt_matched,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApVariant {
    /// Area under the monotone precision envelope at every recall step.
    #[default]
    AllPoint,
    /// Mean of the envelope sampled at recall 0, 0.1, ..., 1.
    ElevenPoint,
}

/// Precision/recall after each distinct score, highest score first. Equal
/// scores enter together, so the curve does not depend on input order.
fn pr_points(matches: &[MatchResult], total_gt: usize) -> Vec<(f64, f64)> {
    let mut ranked: Vec<(f64, bool)> = matches
        .iter()
        .flat_map(|m| m.detections.iter().map(|d| (d.score, d.is_tp())))
        .collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < ranked.len() {
        let score = ranked[i].0;
        while i < ranked.len() && ranked[i].0.total_cmp(&score) == Ordering::Equal {
            if ranked[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / total_gt as f64;
        points.push((recall, precision));
    }
    points
}

/// AP over matches pooled across images. With no ground truth the result
/// is 1 when nothing was detected and 0 otherwise.
pub fn average_precision(matches: &[MatchResult], total_gt: usize, variant: ApVariant) -> f64 {
    let any_dets = matches.iter().any(|m| !m.detections.is_empty());
    if total_gt == 0 {
        return if any_dets { 0.0 } else { 1.0 };
    }
    let points = pr_points(matches, total_gt);
    // precision envelope: best precision at this recall or beyond
    let mut envelope = vec![0.0; points.len()];
    let mut best: f64 = 0.0;
    for (k, &(_, p)) in points.iter().enumerate().rev() {
        best = best.max(p);
        envelope[k] = best;
    }
    match variant {
        ApVariant::AllPoint => {
            let mut ap = 0.0;
            let mut prev_recall = 0.0;
            for (k, &(r, _)) in points.iter().enumerate() {
                if r > prev_recall {
                    ap += (r - prev_recall) * envelope[k];
                    prev_recall = r;
                }
            }
            ap
        }
        ApVariant::ElevenPoint => {
            let sum: f64 = (0..=10)
                .map(|t| {
                    let r = t as f64 / 10.0;
                    points
                        .iter()
                        .zip(&envelope)
                        .find(|((rec, _), _)| *rec >= r)
                        .map_or(0.0, |(_, e)| *e)
                })
                .sum();
            sum / 11.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSnapshot {
    pub map_at_50: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub total_gt: usize,
    pub test_images: usize,
}

/// Runs `detector` over `images` and scores the detections against their
/// ground truth.
pub fn evaluate<D: Detector + ?Sized>(
    detector: &D,
    model: &ModelState,
    images: &[&ImageRecord],
    iou_threshold: f64,
    variant: ApVariant,
) -> Result<EvalSnapshot, EvalError> {
    let matches: Vec<MatchResult> = images
        .par_iter()
        .map(|img| {
            let out = detector.detect(model, img)?;
            match_detections(&out.detections, &img.objects, iou_threshold)
        })
        .collect::<Result<_, _>>()?;
    let total_gt = images.iter().map(|i| i.objects.len()).sum();
    Ok(EvalSnapshot {
        map_at_50: average_precision(&matches, total_gt, variant),
        true_positives: matches.iter().map(|m| m.true_positives()).sum(),
        false_positives: matches.iter().map(|m| m.false_positives()).sum(),
        total_gt,
        test_images: images.len(),
    })
}

/// Pearson correlation coefficient.
pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64, EvalError> {
    if x.len() != y.len() {
        return Err(EvalError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(EvalError::TooFew(2));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(EvalError::UndefinedCorrelation);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Root-mean-square difference.
pub fn rmse(x: &[f64], y: &[f64]) -> Result<f64, EvalError> {
    if x.len() != y.len() {
        return Err(EvalError::LengthMismatch(x.len(), y.len()));
    }
    if x.is_empty() {
        return Err(EvalError::TooFew(1));
    }
    let sq: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((sq / x.len() as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityRow {
    pub image_id: String,
    pub predicted_count: usize,
    pub actual_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityReport {
    /// `None` when a count vector is constant (and the two differ), which
    /// leaves the correlation undefined.
    pub r: Option<f64>,
    pub rmse: f64,
    pub rows: Vec<DensityRow>,
}

/// Compares per-image detection counts with ground-truth counts.
pub fn density_from_rows(rows: Vec<DensityRow>) -> Result<DensityReport, EvalError> {
    let pred: Vec<f64> = rows.iter().map(|r| r.predicted_count as f64).collect();
    let actual: Vec<f64> = rows.iter().map(|r| r.actual_count as f64).collect();
    let rmse = rmse(&pred, &actual)?;
    let r = if pred == actual && pearson_r(&pred, &actual).is_ok() {
        Some(1.0)
    } else {
        match pearson_r(&pred, &actual) {
            Ok(r) => Some(r),
            Err(EvalError::UndefinedCorrelation) => None,
            Err(e) => return Err(e),
        }
    };
    Ok(DensityReport { r, rmse, rows })
}

pub fn density_report<D: Detector + ?Sized>(
    detector: &D,
    model: &ModelState,
    test: &[&ImageRecord],
) -> Result<DensityReport, EvalError> {
    let rows = test
        .par_iter()
        .map(|img| {
            let out = detector.detect(model, img)?;
            Ok(DensityRow {
                image_id: img.id.clone(),
                predicted_count: out.detections.len(),
                actual_count: img.objects.len(),
            })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    density_from_rows(rows)
}

/// One learning-curve sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub method: String,
    pub seed: u64,
    pub episode: u32,
    pub images_labeled: usize,
    pub annotation_hours: f64,
    pub map_at_50: f64,
}

/// One row per logged episode that carries an evaluation.
pub fn emit_curves(method: &str, seed: u64, logs: &[EpisodeLog]) -> Vec<CurvePoint> {
    logs.iter()
        .filter_map(|log| {
            log.eval.as_ref().map(|e| CurvePoint {
                method: method.to_string(),
                seed,
                episode: log.episode,
                images_labeled: log.pools.labeled,
                annotation_hours: log.ledger.seconds_total.hours(),
                map_at_50: e.map_at_50,
            })
        })
        .collect()
}

pub fn write_curves_csv<W: Write>(points: &[CurvePoint], sink: W) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(sink);
    if points.is_empty() {
        w.write_record([
            "method",
            "seed",
            "episode",
            "images_labeled",
            "annotation_hours",
            "map_at_50",
        ])?;
    }
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_curves_csv<R: std::io::Read>(source: R) -> Result<Vec<CurvePoint>, EvalError> {
    csv::Reader::from_reader(source)
        .deserialize()
        .collect::<Result<_, _>>()
        .map_err(EvalError::from)
}

/// Annotation hours at which a curve first reaches `target` AP, linearly
/// interpolated between the two episodes that straddle it.
pub fn hours_to_target(points: &[CurvePoint], target: f64) -> Option<f64> {
    let idx = points.iter().position(|p| p.map_at_50 >= target)?;
    let hit = &points[idx];
    if idx == 0 {
        return Some(hit.annotation_hours);
    }
    let prev = &points[idx - 1];
    let span = hit.map_at_50 - prev.map_at_50;
    if span <= 0.0 {
        return Some(hit.annotation_hours);
    }
    let t = (target - prev.map_at_50) / span;
    Some(prev.annotation_hours + t * (hit.annotation_hours - prev.annotation_hours))
}
