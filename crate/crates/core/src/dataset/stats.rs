//! Object-layout statistics and RPF hyperparameter tuning.

use serde::{Deserialize, Serialize};

use super::{DatasetError, DatasetManifest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    /// One entry per image with at least two objects: the smallest
    /// center-to-center distance between any two of its objects.
    pub min_pairwise_center_distances: Vec<f64>,
    /// One entry per object.
    pub box_areas: Vec<f64>,
}

/// Search radius (pixels) and maximum proposal area (square pixels) for
/// region proposal filtering.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RpfParams {
    pub epsilon: f64,
    pub alpha: f64,
}

impl RpfParams {
    pub fn new(epsilon: f64, alpha: f64) -> Result<Self, DatasetError> {
        if !(epsilon.is_finite() && epsilon > 0.0 && alpha.is_finite() && alpha > 0.0) {
            return Err(DatasetError::InvalidParameter(format!(
                "epsilon and alpha must be positive, got epsilon={epsilon} alpha={alpha}"
            )));
        }
        Ok(Self { epsilon, alpha })
    }
}

pub fn compute_stats(m: &DatasetManifest) -> DatasetStats {
    let mut distances = Vec::new();
    let mut areas = Vec::new();
    for img in &m.images {
        let centers: Vec<_> = img.objects.iter().map(|b| b.center()).collect();
        areas.extend(img.objects.iter().map(|b| b.area()));
        if centers.len() < 2 {
            continue;
        }
        let mut best = f64::INFINITY;
        for (i, a) in centers.iter().enumerate() {
            for b in &centers[i + 1..] {
                best = best.min(a.distance(b));
            }
        }
        distances.push(best);
    }
    DatasetStats {
        min_pairwise_center_distances: distances,
        box_areas: areas,
    }
}

/// Percentile with linear interpolation between closest ranks (the
/// "inclusive" definition): rank `p/100 * (n-1)` into the sorted sample.
/// Returns `None` for an empty sample or `p` outside `[0, 100]`.
pub fn percentile(xs: &[f64], p: f64) -> Option<f64> {
    if xs.is_empty() || !(0.0..=100.0).contains(&p) {
        return None;
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    if lo == hi || frac == 0.0 {
        return Some(sorted[lo]);
    }
    Some(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

/// Rounds to `n` significant figures (`n >= 1`).
pub fn round_sig_figs(x: f64, n: u32) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let n = n.max(1) as i32;
    let magnitude = x.abs().log10().floor() as i32;
    let k = magnitude - (n - 1);
    if k >= 0 {
        let scale = 10f64.powi(k);
        (x / scale).round() * scale
    } else {
        let scale = 10f64.powi(-k);
        (x * scale).round() / scale
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rounding {
    None,
    SigFigs(u32),
}

impl Rounding {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Rounding::None => x,
            Rounding::SigFigs(n) => round_sig_figs(x, n),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuneOptions {
    pub eps_percentile: f64,
    pub alpha_percentile: f64,
    pub eps_rounding: Rounding,
    pub alpha_rounding: Rounding,
}

impl Default for TuneOptions {
    /// 20th/90th percentiles; epsilon rounded to one significant figure and
    /// alpha to two (18 -> 20, 77 -> 80, 20448 -> 20000, 1404 -> 1400).
    fn default() -> Self {
        Self {
            eps_percentile: 20.0,
            alpha_percentile: 90.0,
            eps_rounding: Rounding::SigFigs(1),
            alpha_rounding: Rounding::SigFigs(2),
        }
    }
}

impl TuneOptions {
    pub fn unrounded() -> Self {
        Self {
            eps_rounding: Rounding::None,
            alpha_rounding: Rounding::None,
            ..Self::default()
        }
    }

    pub fn with_rounding(self, rounding: Rounding) -> Self {
        Self {
            eps_rounding: rounding,
            alpha_rounding: rounding,
            ..self
        }
    }
}

pub fn tune_rpf_params(s: &DatasetStats, opts: &TuneOptions) -> Result<RpfParams, DatasetError> {
    for p in [opts.eps_percentile, opts.alpha_percentile] {
        if !(0.0..=100.0).contains(&p) {
            return Err(DatasetError::InvalidParameter(format!(
                "percentile {p} outside [0,100]"
            )));
        }
    }
    let eps = percentile(&s.min_pairwise_center_distances, opts.eps_percentile).ok_or(DatasetError::NoDistances)?;
    let alpha = percentile(&s.box_areas, opts.alpha_percentile).ok_or(DatasetError::NoAreas)?;
    RpfParams::new(opts.eps_rounding.apply(eps), opts.alpha_rounding.apply(alpha))
}
