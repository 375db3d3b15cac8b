//! Annotation sources and the annotation-cost ledger.
//!
//! Costs use fixed per-action times: 7.8 s to check an image, 3.0 s per
//! click, 34.5 s per box (25.5 s drawing plus 9.0 s verifying). Amounts are
//! kept in integer tenths of a second so every ledger value is exact.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::dataset::ImageRecord;
use crate::geometry::{BoundingBox, ClickPoint};
use crate::sampling::WeakLabelSet;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("image {0} has no weak labels")]
    MissingWeakLabels(String),
    #[error("weak labels belong to {found}, not {expected}")]
    WeakLabelMismatch { expected: String, found: String },
    #[error("invalid oracle parameter: {0}")]
    InvalidParameter(String),
    #[error("the human oracle answers through the annotation service, not in-process")]
    HumanMode,
    #[error("ledger is in {ledger:?} mode and cannot record a {event} event")]
    ModeMismatch { ledger: CostMode, event: &'static str },
}

/// A non-negative duration in tenths of a second, serialized as an exact
/// decimal string such as `"42.3"`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Seconds(u64);

impl Seconds {
    pub const ZERO: Seconds = Seconds(0);

    pub fn from_tenths(tenths: u64) -> Self {
        Seconds(tenths)
    }

    pub fn tenths(self) -> u64 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64 / 10.0
    }

    pub fn hours(self) -> f64 {
        self.0 as f64 / 36_000.0
    }
}

impl std::ops::Add for Seconds {
    type Output = Seconds;

    fn add(self, rhs: Seconds) -> Seconds {
        Seconds(self.0 + rhs.0)
    }
}

impl std::ops::AddAssign for Seconds {
    fn add_assign(&mut self, rhs: Seconds) {
        self.0 += rhs.0;
    }
}

impl fmt::Display for Seconds {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.0 / 10, self.0 % 10)
    }
}

impl FromStr for Seconds {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || format!("invalid seconds value {s:?}");
        let (whole, frac) = s.split_once('.').unwrap_or((s, "0"));
        if whole.is_empty() || frac.len() != 1 || !whole.bytes().chain(frac.bytes()).all(|b| b.is_ascii_digit()) {
            return Err(err());
        }
        let whole: u64 = whole.parse().map_err(|_| err())?;
        let frac: u64 = frac.parse().map_err(|_| err())?;
        whole
            .checked_mul(10)
            .and_then(|w| w.checked_add(frac))
            .map(Seconds)
            .ok_or_else(err)
    }
}

impl Serialize for Seconds {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Seconds {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

const CHECK_IMAGE: u64 = 78;
const DRAW_BOX: u64 = 345;
const CLICK: u64 = 30;

fn count(n: usize) -> u64 {
    n as u64
}

/// One-stage box annotation: `7.8 Q + 34.5 b_Q`.
pub fn cost_baseline(images: usize, objects: usize) -> Seconds {
    Seconds(CHECK_IMAGE * count(images) + DRAW_BOX * count(objects))
}

/// Point-supervised annotation: `7.8 Q_W + 34.5 b_QS + 3 b_QW`.
pub fn cost_proposed(weak_images: usize, weak_objects: usize, strong_objects: usize) -> Seconds {
    Seconds(CHECK_IMAGE * count(weak_images) + DRAW_BOX * count(strong_objects) + CLICK * count(weak_objects))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostMode {
    /// Boxes drawn from scratch; costed by [`cost_baseline`].
    Baseline,
    /// Clicks then boxes; costed by [`cost_proposed`].
    Proposed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LedgerEvent {
    /// Type-1 batch: images checked and objects clicked.
    Weak { images: usize, objects: usize },
    /// Type-2 batch: boxes drawn over existing clicks.
    Strong { images: usize, objects: usize },
    /// One-stage batch: images checked and boxes drawn from scratch.
    Baseline { images: usize, objects: usize },
}

/// Cumulative annotation counts and their cost.
///
/// In baseline mode all time lands in `seconds_type2` and the weak counters
/// stay zero.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostLedger {
    pub mode: CostMode,
    pub seconds_total: Seconds,
    pub seconds_type1: Seconds,
    pub seconds_type2: Seconds,
    pub images_weak: u64,
    pub images_strong: u64,
    pub objects_weak: u64,
    pub objects_strong: u64,
}

impl CostLedger {
    pub fn new(mode: CostMode) -> Self {
        Self {
            mode,
            seconds_total: Seconds::ZERO,
            seconds_type1: Seconds::ZERO,
            seconds_type2: Seconds::ZERO,
            images_weak: 0,
            images_strong: 0,
            objects_weak: 0,
            objects_strong: 0,
        }
    }

    /// Applies `event`, charging only the incremental cost.
    pub fn update(&mut self, event: LedgerEvent) -> Result<(), OracleError> {
        let mismatch = |event| OracleError::ModeMismatch {
            ledger: self.mode,
            event,
        };
        match (self.mode, event) {
            (CostMode::Proposed, LedgerEvent::Weak { images, objects }) => {
                self.images_weak += count(images);
                self.objects_weak += count(objects);
                self.seconds_type1 += cost_proposed(images, objects, 0);
            }
            (CostMode::Proposed, LedgerEvent::Strong { images, objects }) => {
                self.images_strong += count(images);
                self.objects_strong += count(objects);
                self.seconds_type2 += cost_proposed(0, 0, objects);
            }
            (CostMode::Baseline, LedgerEvent::Baseline { images, objects }) => {
                self.images_strong += count(images);
                self.objects_strong += count(objects);
                self.seconds_type2 += cost_baseline(images, objects);
            }
            (_, LedgerEvent::Weak { .. }) => return Err(mismatch("weak")),
            (_, LedgerEvent::Strong { .. }) => return Err(mismatch("strong")),
            (_, LedgerEvent::Baseline { .. }) => return Err(mismatch("baseline")),
        }
        self.seconds_total = self.seconds_type1 + self.seconds_type2;
        Ok(())
    }

    /// Cost recomputed in closed form from the cumulative counters.
    pub fn closed_form(&self) -> Seconds {
        match self.mode {
            CostMode::Baseline => Seconds(CHECK_IMAGE * self.images_strong + DRAW_BOX * self.objects_strong),
            CostMode::Proposed => {
                Seconds(CHECK_IMAGE * self.images_weak + DRAW_BOX * self.objects_strong + CLICK * self.objects_weak)
            }
        }
    }

    /// Incremental totals agree with the closed form and mode exclusivity
    /// holds.
    pub fn is_consistent(&self) -> bool {
        let exclusive = match self.mode {
            CostMode::Baseline => {
                self.seconds_type1 == Seconds::ZERO && self.images_weak == 0 && self.objects_weak == 0
            }
            CostMode::Proposed => true,
        };
        exclusive
            && self.seconds_total == self.seconds_type1 + self.seconds_type2
            && self.seconds_total == self.closed_form()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMode {
    #[default]
    Simulated,
    Human,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub mode: OracleMode,
    /// Click offset standard deviation as a fraction of each box's
    /// half-extent, per axis.
    pub click_jitter_frac: f64,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            mode: OracleMode::Simulated,
            click_jitter_frac: 0.1,
            seed: 0,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<(), OracleError> {
        if !(self.click_jitter_frac >= 0.0 && self.click_jitter_frac.is_finite()) {
            return Err(OracleError::InvalidParameter(format!(
                "click_jitter_frac must be finite and >= 0, got {}",
                self.click_jitter_frac
            )));
        }
        Ok(())
    }
}

/// Offset drawn from Normal(0, sd) truncated to the open interval
/// `(-half, half)` by inverse-CDF sampling.
fn truncated_offset<R: Rng>(rng: &mut R, sd: f64, half: f64) -> f64 {
    let u: f64 = rng.random();
    if sd == 0.0 {
        return 0.0;
    }
    let normal = Normal::new(0.0, sd).expect("positive sd");
    let lo = normal.cdf(-half);
    let hi = normal.cdf(half);
    let x = normal.inverse_cdf(lo + u * (hi - lo));
    if x.is_finite() {
        x
    } else {
        0.0
    }
}

/// One click per ground-truth object, near its center and strictly inside
/// it. Deterministic per `(cfg.seed, image.id)`.
pub fn annotate_type1(image: &ImageRecord, cfg: &OracleConfig) -> Result<WeakLabelSet, OracleError> {
    if cfg.mode == OracleMode::Human {
        return Err(OracleError::HumanMode);
    }
    cfg.validate()?;
    let mut rng = seed::stream(cfg.seed, "type1", &image.id, 0);
    let clicks = image
        .objects
        .iter()
        .map(|b| {
            let c = b.center();
            let (hw, hh) = (b.width() / 2.0, b.height() / 2.0);
            let dx = truncated_offset(&mut rng, cfg.click_jitter_frac * hw, hw);
            let dy = truncated_offset(&mut rng, cfg.click_jitter_frac * hh, hh);
            // addition can round a near-edge offset onto the edge itself
            let inside = |v: f64, lo: f64, hi: f64, center: f64| if v > lo && v < hi { v } else { center };
            ClickPoint {
                x: inside(c.x + dx, b.x_min(), b.x_max(), c.x),
                y: inside(c.y + dy, b.y_min(), b.y_max(), c.y),
            }
        })
        .collect();
    Ok(WeakLabelSet {
        image_id: image.id.clone(),
        clicks,
    })
}

/// Exact ground-truth boxes for an image that already carries weak labels.
pub fn annotate_type2(
    image: &ImageRecord,
    weak: Option<&WeakLabelSet>,
    cfg: &OracleConfig,
) -> Result<Vec<BoundingBox>, OracleError> {
    if cfg.mode == OracleMode::Human {
        return Err(OracleError::HumanMode);
    }
    let weak = weak.ok_or_else(|| OracleError::MissingWeakLabels(image.id.clone()))?;
    if weak.image_id != image.id {
        return Err(OracleError::WeakLabelMismatch {
            expected: image.id.clone(),
            found: weak.image_id.clone(),
        });
    }
    Ok(image.objects.clone())
}

/// Boxes drawn from scratch, as one-stage baselines request them.
pub fn annotate_full(image: &ImageRecord, cfg: &OracleConfig) -> Result<Vec<BoundingBox>, OracleError> {
    if cfg.mode == OracleMode::Human {
        return Err(OracleError::HumanMode);
    }
    Ok(image.objects.clone())
}

/// An in-process annotation source the engine can call synchronously.
pub trait Oracle {
    fn type1(&self, image: &ImageRecord) -> Result<WeakLabelSet, OracleError>;
    fn type2(&self, image: &ImageRecord, weak: Option<&WeakLabelSet>) -> Result<Vec<BoundingBox>, OracleError>;
    fn full(&self, image: &ImageRecord) -> Result<Vec<BoundingBox>, OracleError>;
}

#[derive(Debug, Clone)]
pub struct SimulatedOracle {
    cfg: OracleConfig,
}

impl SimulatedOracle {
    pub fn new(cfg: OracleConfig) -> Result<Self, OracleError> {
        if cfg.mode == OracleMode::Human {
            return Err(OracleError::HumanMode);
        }
        cfg.validate()?;
        Ok(Self { cfg })
    }
}

impl Oracle for SimulatedOracle {
    fn type1(&self, image: &ImageRecord) -> Result<WeakLabelSet, OracleError> {
        annotate_type1(image, &self.cfg)
    }

    fn type2(&self, image: &ImageRecord, weak: Option<&WeakLabelSet>) -> Result<Vec<BoundingBox>, OracleError> {
        annotate_type2(image, weak, &self.cfg)
    }

    fn full(&self, image: &ImageRecord) -> Result<Vec<BoundingBox>, OracleError> {
        annotate_full(image, &self.cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn image(objects: Vec<BoundingBox>) -> ImageRecord {
        ImageRecord {
            id: "img".into(),
            width: 200.0,
            height: 200.0,
            difficulty: 0.0,
            image_uri: None,
            objects,
        }
    }

    fn bx(a: f64, b: f64, c: f64, d: f64) -> BoundingBox {
        BoundingBox::new(a, b, c, d).unwrap()
    }

    #[test]
    fn cost_formulas() {
        assert_eq!(cost_baseline(0, 0), Seconds::ZERO);
        assert_eq!(cost_baseline(1, 1).to_string(), "42.3");
        assert_eq!(cost_baseline(50, 500).to_string(), "17640.0");
        assert_eq!(cost_proposed(0, 0, 0), Seconds::ZERO);
        assert_eq!(cost_proposed(1, 1, 0).to_string(), "10.8");
        assert_eq!(cost_proposed(50, 600, 300).to_string(), "12540.0");
        assert_eq!(cost_proposed(50, 600, 300).as_f64(), 12540.0);
    }

    #[test]
    fn seconds_string_round_trip() {
        for s in ["0.0", "42.3", "17640.0", "10.8"] {
            let v: Seconds = s.parse().unwrap();
            assert_eq!(v.to_string(), s);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{s}\""));
            assert_eq!(serde_json::from_str::<Seconds>(&json).unwrap(), v);
        }
        assert_eq!("12".parse::<Seconds>().unwrap().to_string(), "12.0");
        for bad in ["", "1.23", "-1.0", "a.b", ".5", "1e3"] {
            assert!(bad.parse::<Seconds>().is_err(), "{bad}");
        }
    }

    #[test]
    fn ledger_updates_match_components() {
        let mut l = CostLedger::new(CostMode::Proposed);
        l.update(LedgerEvent::Weak {
            images: 10,
            objects: 40,
        })
        .unwrap();
        assert_eq!(l.seconds_type1.to_string(), "198.0");
        l.update(LedgerEvent::Strong { images: 5, objects: 20 }).unwrap();
        assert_eq!(l.seconds_type2.to_string(), "690.0");
        assert_eq!(l.seconds_total.to_string(), "888.0");
        assert!(l.is_consistent());
        assert!(matches!(
            l.update(LedgerEvent::Baseline { images: 1, objects: 1 }),
            Err(OracleError::ModeMismatch { .. })
        ));

        let mut b = CostLedger::new(CostMode::Baseline);
        b.update(LedgerEvent::Baseline {
            images: 50,
            objects: 500,
        })
        .unwrap();
        assert_eq!(b.seconds_total.to_string(), "17640.0");
        assert_eq!(b.seconds_type1, Seconds::ZERO);
        assert!(b.is_consistent());
        assert!(b.update(LedgerEvent::Weak { images: 1, objects: 1 }).is_err());
    }

    #[test]
    fn type1_examples() {
        let cfg = OracleConfig {
            click_jitter_frac: 0.0,
            ..Default::default()
        };
        let w = annotate_type1(&image(vec![bx(0.0, 0.0, 10.0, 10.0)]), &cfg).unwrap();
        assert_eq!(w.clicks, vec![ClickPoint { x: 5.0, y: 5.0 }]);
        let three = image(vec![
            bx(0.0, 0.0, 10.0, 10.0),
            bx(20.0, 20.0, 40.0, 40.0),
            bx(50.0, 0.0, 60.0, 5.0),
        ]);
        let cfg = OracleConfig::default();
        assert_eq!(annotate_type1(&three, &cfg).unwrap().clicks.len(), 3);
        assert_eq!(
            annotate_type1(&three, &cfg).unwrap(),
            annotate_type1(&three, &cfg).unwrap()
        );
        let human = OracleConfig {
            mode: OracleMode::Human,
            ..Default::default()
        };
        assert_eq!(annotate_type1(&three, &human), Err(OracleError::HumanMode));
    }

    #[test]
    fn jittered_clicks_stay_inside_and_centered() {
        let cfg = OracleConfig {
            click_jitter_frac: 0.2,
            seed: 11,
            ..Default::default()
        };
        let b = bx(0.0, 0.0, 100.0, 100.0);
        let mut img = image(vec![b; 10_000]);
        img.width = 100.0;
        img.height = 100.0;
        let clicks = annotate_type1(&img, &cfg).unwrap().clicks;
        assert!(clicks
            .iter()
            .all(|c| c.x > 0.0 && c.x < 100.0 && c.y > 0.0 && c.y < 100.0));
        let n = clicks.len() as f64;
        let mx = clicks.iter().map(|c| c.x).sum::<f64>() / n;
        let my = clicks.iter().map(|c| c.y).sum::<f64>() / n;
        assert!((mx - 50.0).abs() < 1.0 && (my - 50.0).abs() < 1.0, "{mx} {my}");
    }

    #[test]
    fn type2_requires_matching_weak_labels() {
        let cfg = OracleConfig::default();
        let img = image(vec![bx(1.0, 1.0, 5.0, 5.0)]);
        let w = annotate_type1(&img, &cfg).unwrap();
        assert_eq!(annotate_type2(&img, Some(&w), &cfg).unwrap(), img.objects);
        assert_eq!(
            annotate_type2(&img, None, &cfg),
            Err(OracleError::MissingWeakLabels("img".into()))
        );
        let other = WeakLabelSet {
            image_id: "x".into(),
            clicks: vec![],
        };
        assert!(matches!(
            annotate_type2(&img, Some(&other), &cfg),
            Err(OracleError::WeakLabelMismatch { .. })
        ));
        let empty = image(vec![]);
        let w = annotate_type1(&empty, &cfg).unwrap();
        assert!(annotate_type2(&empty, Some(&w), &cfg).unwrap().is_empty());
    }

    proptest! {
        #[test]
        fn clicks_strictly_inside_for_any_jitter(
            x in 0.0f64..100.0, y in 0.0f64..100.0,
            w in 0.01f64..80.0, h in 0.01f64..80.0,
            jitter in prop_oneof![Just(0.0), 0.0f64..5.0, Just(1e6)],
            seed in any::<u64>(),
        ) {
            let b = bx(x, y, x + w, y + h);
            let cfg = OracleConfig { click_jitter_frac: jitter, seed, ..Default::default() };
            let clicks = annotate_type1(&image(vec![b; 20]), &cfg).unwrap().clicks;
            for c in clicks {
                prop_assert!(c.x > b.x_min() && c.x < b.x_max() && c.y > b.y_min() && c.y < b.y_max(),
                    "{:?} not strictly inside {:?}", c, b);
            }
        }

        #[test]
        fn incremental_ledger_equals_closed_form(
            events in prop::collection::vec((0usize..60, 0usize..400, any::<bool>()), 1..30),
        ) {
            let mut l = CostLedger::new(CostMode::Proposed);
            let mut b = CostLedger::new(CostMode::Baseline);
            for (images, objects, weak) in events {
                let e = if weak { LedgerEvent::Weak { images, objects } } else { LedgerEvent::Strong { images, objects } };
                l.update(e).unwrap();
                b.update(LedgerEvent::Baseline { images, objects }).unwrap();
                prop_assert!(l.is_consistent());
                prop_assert!(b.is_consistent());
                prop_assert_eq!(
                    l.seconds_total,
                    cost_proposed(l.images_weak as usize, l.objects_weak as usize, l.objects_strong as usize)
                );
                prop_assert_eq!(b.seconds_total, cost_baseline(b.images_strong as usize, b.objects_strong as usize));
            }
        }
    }
}
