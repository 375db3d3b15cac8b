//! A seeded stand-in for a two-stage detector whose quality grows with the
//! size of its training set.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use super::{nms, Detector, DetectorError, DetectorOutput, LabeledImage, ModelState, ScoredBox};
use crate::dataset::ImageRecord;
use crate::geometry::BoundingBox;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticDetectorParams {
    /// Proposals emitted around each ground-truth object.
    pub proposals_per_object: usize,
    /// Std-dev of the center offset, as a fraction of the box width/height.
    pub center_jitter_frac: f64,
    /// Std-dev of the relative size change.
    pub size_jitter_frac: f64,
    /// Expected number of background proposals per image (Poisson mean).
    pub false_positive_rate: f64,
    /// Background proposal scores are uniform below this cap for an
    /// untrained model; the cap shrinks by 60% at full skill.
    pub false_positive_score_cap: f64,
    /// Learning-curve time constant, in labeled images.
    pub skill_tau: f64,
    pub noise_scale: f64,
    /// Base objectness of a true object for an untrained model on an
    /// image of zero difficulty.
    pub score_offset: f64,
    /// Base objectness gained at full skill.
    pub skill_gain: f64,
    /// Score lost per unit of `1 - IoU` between a proposal and its object,
    /// so loosely placed duplicates rank below well placed ones.
    pub localization_weight: f64,
    pub nms_iou: f64,
    pub detection_floor: f64,
    /// Fraction of the base score's margin above 0.5 lost per unit of
    /// image difficulty.
    pub difficulty_penalty: f64,
    /// Extra training weight a labeled image earns per unit difficulty.
    /// Zero makes skill depend on the labeled count alone.
    pub hard_example_weight: f64,
}

impl Default for SyntheticDetectorParams {
    fn default() -> Self {
        Self {
            proposals_per_object: 6,
            center_jitter_frac: 0.08,
            size_jitter_frac: 0.08,
            false_positive_rate: 4.0,
            false_positive_score_cap: 1.0,
            skill_tau: 300.0,
            noise_scale: 0.1,
            score_offset: 0.75,
            skill_gain: 0.2,
            localization_weight: 0.5,
            nms_iou: 0.5,
            detection_floor: 0.5,
            difficulty_penalty: 0.9,
            hard_example_weight: 0.0,
        }
    }
}

impl SyntheticDetectorParams {
    pub fn validate(&self) -> Result<(), DetectorError> {
        let bad = |msg: String| Err(DetectorError::InvalidParameter(msg));
        let non_negative = [
            ("center_jitter_frac", self.center_jitter_frac),
            ("size_jitter_frac", self.size_jitter_frac),
            ("false_positive_rate", self.false_positive_rate),
            ("noise_scale", self.noise_scale),
            ("score_offset", self.score_offset),
            ("skill_gain", self.skill_gain),
            ("localization_weight", self.localization_weight),
            ("difficulty_penalty", self.difficulty_penalty),
            ("hard_example_weight", self.hard_example_weight),
        ];
        for (name, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if self.proposals_per_object == 0 {
            return bad("proposals_per_object must be positive".into());
        }
        if !(self.skill_tau.is_finite() && self.skill_tau > 0.0) {
            return bad(format!("skill_tau must be positive, got {}", self.skill_tau));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou < 1.0) {
            return bad(format!("nms_iou must be in (0,1), got {}", self.nms_iou));
        }
        if !(0.0..=1.0).contains(&self.false_positive_score_cap) {
            return bad(format!(
                "false_positive_score_cap must be in [0,1], got {}",
                self.false_positive_score_cap
            ));
        }
        if !(0.0..=1.0).contains(&self.detection_floor) {
            return bad(format!(
                "detection_floor must be in [0,1], got {}",
                self.detection_floor
            ));
        }
        Ok(())
    }
}

/// `1 - exp(-n / tau)`.
pub fn skill_for(n: f64, tau: f64) -> f64 {
    1.0 - (-n / tau).exp()
}

#[derive(Debug, Clone)]
pub struct SyntheticDetector {
    params: SyntheticDetectorParams,
    seed: u64,
}

impl SyntheticDetector {
    pub fn new(params: SyntheticDetectorParams, seed: u64) -> Result<Self, DetectorError> {
        params.validate()?;
        Ok(Self { params, seed })
    }

    pub fn params(&self) -> &SyntheticDetectorParams {
        &self.params
    }

    /// Model state for an explicit skill level; useful for probing.
    pub fn model_with_skill(skill: f64, round: u32) -> ModelState {
        ModelState {
            model_id: format!("synthetic-r{round}-skill{skill}"),
            round,
            trained_on: 0,
            skill: Some(skill.clamp(0.0, 1.0)),
        }
    }

    /// Difficulty shrinks the margin above 0.5 rather than pushing the
    /// score below it: hard objects look ambiguous, not absent.
    fn base_score(&self, skill: f64, difficulty: f64) -> f64 {
        let p = &self.params;
        let margin = p.score_offset - 0.5 + p.skill_gain * skill;
        (0.5 + margin * (1.0 - p.difficulty_penalty * difficulty)).clamp(0.0, 1.0)
    }

    fn jittered(&self, gt: &BoundingBox, image: &ImageRecord, rng: &mut ChaCha8Rng) -> BoundingBox {
        let p = &self.params;
        let (w, h) = (gt.width(), gt.height());
        let c = gt.center();
        let cx = c.x + gaussian(rng, p.center_jitter_frac * w);
        let cy = c.y + gaussian(rng, p.center_jitter_frac * h);
        let nw = (w * (1.0 + gaussian(rng, p.size_jitter_frac))).max(1.0);
        let nh = (h * (1.0 + gaussian(rng, p.size_jitter_frac))).max(1.0);
        clip_box(cx, cy, nw, nh, image.width, image.height)
    }
}

fn gaussian(rng: &mut ChaCha8Rng, std_dev: f64) -> f64 {
    // always consume one draw so the stream layout does not depend on parameters
    let z: f64 = rng.sample(rand_distr::StandardNormal);
    z * std_dev
}

/// Clips a center/size box into the image, keeping at least one pixel of
/// extent per axis (or the whole axis when the image is smaller than that).
fn clip_box(cx: f64, cy: f64, w: f64, h: f64, img_w: f64, img_h: f64) -> BoundingBox {
    let axis = |c: f64, len: f64, limit: f64| {
        let min_len = limit.min(1.0);
        let mut lo = (c - len / 2.0).clamp(0.0, limit);
        let mut hi = (c + len / 2.0).clamp(0.0, limit);
        if hi - lo < min_len {
            if lo + min_len <= limit {
                hi = lo + min_len;
            } else {
                lo = limit - min_len;
                hi = limit;
            }
        }
        (lo, hi)
    };
    let (x0, x1) = axis(cx, w, img_w);
    let (y0, y1) = axis(cy, h, img_h);
    BoundingBox::new(x0, y0, x1, y1).expect("clipped box has positive extent")
}

impl Detector for SyntheticDetector {
    fn train(&self, labeled: &[LabeledImage<'_>], round: u32) -> Result<ModelState, DetectorError> {
        if labeled.is_empty() {
            return Err(DetectorError::EmptyTrainingSet);
        }
        let effective: f64 = labeled
            .iter()
            .map(|l| 1.0 + self.params.hard_example_weight * l.image.difficulty)
            .sum();
        let skill = skill_for(effective, self.params.skill_tau);
        Ok(ModelState {
            model_id: format!("synthetic-r{round}-n{}", labeled.len()),
            round,
            trained_on: labeled.len(),
            skill: Some(skill),
        })
    }

    fn detect(&self, model: &ModelState, image: &ImageRecord) -> Result<DetectorOutput, DetectorError> {
        let p = &self.params;
        let skill = model.skill.unwrap_or(0.0).clamp(0.0, 1.0);
        let difficulty = image.difficulty.clamp(0.0, 1.0);
        let mut rng = seed::stream(self.seed, "detect", &image.id, model.round as u64);
        let base = self.base_score(skill, difficulty);
        let noise_sd = p.noise_scale * (1.0 - skill) * (0.5 + difficulty);

        let mut proposals = Vec::with_capacity(image.objects.len() * p.proposals_per_object);
        for gt in &image.objects {
            for _ in 0..p.proposals_per_object {
                let bbox = self.jittered(gt, image, &mut rng);
                let miss = 1.0 - bbox.iou(gt);
                let score = (base - p.localization_weight * miss + gaussian(&mut rng, noise_sd)).clamp(0.0, 1.0);
                proposals.push(ScoredBox { bbox, score });
            }
        }

        let fp_count = if p.false_positive_rate > 0.0 {
            Poisson::new(p.false_positive_rate)
                .map_err(|e| DetectorError::InvalidParameter(e.to_string()))?
                .sample(&mut rng) as usize
        } else {
            0
        };
        let short_side = image.width.min(image.height);
        let fp_cap = p.false_positive_score_cap * (1.0 - 0.6 * skill);
        for _ in 0..fp_count {
            let side_frac: f64 = rng.random_range(0.05..0.2);
            let w = (short_side * side_frac).max(1.0);
            let h = (short_side * rng.random_range(0.05..0.2)).max(1.0);
            let cx = rng.random_range(0.0..image.width);
            let cy = rng.random_range(0.0..image.height);
            let bbox = clip_box(cx, cy, w, h, image.width, image.height);
            let score = (rng.random::<f64>() * fp_cap).clamp(0.0, 1.0);
            proposals.push(ScoredBox { bbox, score });
        }

        let detections = nms(&proposals, p.nms_iou)?
            .into_iter()
            .filter(|d| d.score >= p.detection_floor)
            .collect();
        Ok(DetectorOutput {
            image_id: image.id.clone(),
            proposals,
            detections,
        })
    }
}
