//! Region proposal filtering, uncertainty metrics, and top-k selection.
//!
//! Point-supervision metrics (`mv`, `me`, `mev`) score an image from the
//! proposals that survive [`rpf`] around each click. Baselines (`lc`, `mar`,
//! `ent`) score an image from its final detections, treating each detection
//! score `p` as the Bernoulli distribution `(p, 1 - p)`.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::RpfParams;
use crate::detector::{DetectorOutput, RegionProposal};
use crate::geometry::ClickPoint;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SamplingError {
    #[error("probability {0} outside [0,1]")]
    InvalidProbability(f64),
    #[error("distribution sums to {0}, expected 1")]
    NotNormalized(f64),
    #[error("empty distribution")]
    EmptyDistribution,
    #[error("k must be positive")]
    InvalidK,
    #[error("unknown method {0:?}")]
    UnknownMethod(String),
    #[error("invalid query strategy {0:?}: {1}")]
    InvalidStrategy(String, String),
    #[error("method {0} needs weak labels for image {1}")]
    MissingWeakLabels(Method, String),
}

/// The clicks placed on one image by a Type-1 annotation. May be empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakLabelSet {
    pub image_id: String,
    pub clicks: Vec<ClickPoint>,
}

/// Proposal scores retained by [`rpf`], grouped by click (same order as the
/// clicks of the input [`WeakLabelSet`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilteredProposals {
    pub image_id: String,
    pub per_click: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Mv,
    Me,
    Mev,
    Lc,
    Mar,
    Ent,
    Rand,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Mv,
        Method::Me,
        Method::Mev,
        Method::Lc,
        Method::Mar,
        Method::Ent,
        Method::Rand,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Mv => "mv",
            Method::Me => "me",
            Method::Mev => "mev",
            Method::Lc => "lc",
            Method::Mar => "mar",
            Method::Ent => "ent",
            Method::Rand => "rand",
        }
    }

    /// Whether the method scores images from clicks and filtered proposals.
    pub fn is_point_supervised(self) -> bool {
        matches!(self, Method::Mv | Method::Me | Method::Mev)
    }

    pub fn order(self) -> SelectionOrder {
        match self {
            Method::Mar => SelectionOrder::Ascending,
            Method::Rand => SelectionOrder::Random,
            _ => SelectionOrder::Descending,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = SamplingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| SamplingError::UnknownMethod(s.to_string()))
    }
}

/// A whole-run query strategy: a one-stage baseline, or a two-stage
/// `{weak}_{strong}` pair such as `lc_mv`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum QueryStrategy {
    Baseline(Method),
    PointSupervised { weak: Method, strong: Method },
}

impl QueryStrategy {
    pub fn is_baseline(&self) -> bool {
        matches!(self, QueryStrategy::Baseline(_))
    }

    /// Scorer for moving images out of the unlabeled pool.
    pub fn first_stage(&self) -> Method {
        match *self {
            QueryStrategy::Baseline(m) => m,
            QueryStrategy::PointSupervised { weak, .. } => weak,
        }
    }

    /// Seven strategies covering every scorer once: the four baselines and
    /// one point-supervised pairing per metric.
    pub fn comparison_set() -> Vec<QueryStrategy> {
        ["rand", "lc", "mar", "ent", "lc_mv", "mar_me", "ent_mev"]
            .iter()
            .map(|s| s.parse().expect("valid strategy"))
            .collect()
    }
}

impl fmt::Display for QueryStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QueryStrategy::Baseline(m) => write!(f, "{m}"),
            QueryStrategy::PointSupervised { weak, strong } => write!(f, "{weak}_{strong}"),
        }
    }
}

impl FromStr for QueryStrategy {
    type Err = SamplingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = |why: &str| SamplingError::InvalidStrategy(s.to_string(), why.to_string());
        match s.split_once('_') {
            None => {
                let m: Method = s.parse()?;
                if m.is_point_supervised() {
                    return Err(bad("point-supervised metrics need a first-stage scorer, e.g. lc_mv"));
                }
                Ok(QueryStrategy::Baseline(m))
            }
            Some((w, st)) => {
                let weak: Method = w.parse()?;
                let strong: Method = st.parse()?;
                if weak.is_point_supervised() {
                    return Err(bad("first stage must be one of rand, lc, mar, ent"));
                }
                if !strong.is_point_supervised() {
                    return Err(bad("second stage must be one of mv, me, mev"));
                }
                Ok(QueryStrategy::PointSupervised { weak, strong })
            }
        }
    }
}

impl Serialize for QueryStrategy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for QueryStrategy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyScore {
    pub image_id: String,
    pub value: f64,
    pub method: Method,
}

/// Keeps, for each click, the proposals that contain it, are centered
/// within `epsilon` of it, have area at most `alpha`, and contain no other
/// click.
pub fn rpf(proposals: &[RegionProposal], weak: &WeakLabelSet, params: &RpfParams) -> FilteredProposals {
    let clicks = &weak.clicks;
    let mut per_click = vec![Vec::new(); clicks.len()];
    for p in proposals {
        if p.bbox.area() > params.alpha {
            continue;
        }
        let mut inside = clicks.iter().enumerate().filter(|(_, c)| p.bbox.contains(c));
        let (Some((idx, click)), None) = (inside.next(), inside.next()) else {
            continue;
        };
        if p.bbox.center().distance(click) <= params.epsilon {
            per_click[idx].push(p.score);
        }
    }
    FilteredProposals {
        image_id: weak.image_id.clone(),
        per_click,
    }
}

/// Base-2 Bernoulli entropy, with `0 log 0 = 0`.
pub fn binary_entropy(p: f64) -> Result<f64, SamplingError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(SamplingError::InvalidProbability(p));
    }
    Ok(xlog2x(p) + xlog2x(1.0 - p))
}

fn xlog2x(p: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else {
        -p * p.log2()
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population variance (divides by `n`); 0 for an empty slice.
pub fn population_variance(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
}

/// Mean binary entropy of a set of scores; 0 for an empty slice. Scores are
/// clamped into `[0,1]`, which a [`RegionProposal`] already guarantees.
pub fn mean_binary_entropy(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let total: f64 = xs
        .iter()
        .map(|&p| {
            let p = p.clamp(0.0, 1.0);
            xlog2x(p) + xlog2x(1.0 - p)
        })
        .sum();
    total / xs.len() as f64
}

fn max_over_clicks(f: &FilteredProposals, per_click: impl Fn(&[f64]) -> f64) -> f64 {
    f.per_click
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| per_click(s))
        .fold(0.0, f64::max)
}

pub fn max_variance(f: &FilteredProposals) -> UncertaintyScore {
    UncertaintyScore {
        image_id: f.image_id.clone(),
        value: max_over_clicks(f, population_variance),
        method: Method::Mv,
    }
}

pub fn max_entropy(f: &FilteredProposals) -> UncertaintyScore {
    UncertaintyScore {
        image_id: f.image_id.clone(),
        value: max_over_clicks(f, mean_binary_entropy),
        method: Method::Me,
    }
}

/// Per click `lambda1 * mean entropy + lambda2 * variance`, max over clicks.
pub fn max_ent_var(f: &FilteredProposals, lambda1: f64, lambda2: f64) -> UncertaintyScore {
    UncertaintyScore {
        image_id: f.image_id.clone(),
        value: max_over_clicks(f, |s| {
            lambda1 * mean_binary_entropy(s) + lambda2 * population_variance(s)
        }),
        method: Method::Mev,
    }
}

/// Shannon entropy in bits of a probability vector that sums to 1 (within
/// `1e-9`).
pub fn categorical_entropy(dist: &[f64]) -> Result<f64, SamplingError> {
    let h = categorical_entropy_unnormalized(dist)?;
    let sum: f64 = dist.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(SamplingError::NotNormalized(sum));
    }
    Ok(h)
}

/// `-sum p log2 p` over the vector as given, without requiring it to sum to
/// 1. Entries must still lie in `[0,1]`.
pub fn categorical_entropy_unnormalized(dist: &[f64]) -> Result<f64, SamplingError> {
    if dist.is_empty() {
        return Err(SamplingError::EmptyDistribution);
    }
    if let Some(&p) = dist.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(SamplingError::InvalidProbability(p));
    }
    Ok(dist.iter().map(|&p| xlog2x(p)).sum())
}

/// `1 - max p` of a class distribution.
pub fn least_confidence_of(dist: &[f64]) -> Result<f64, SamplingError> {
    let top = dist.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return Err(SamplingError::EmptyDistribution);
    }
    Ok(1.0 - top)
}

/// Difference between the two largest entries of a class distribution.
pub fn margin_of(dist: &[f64]) -> Result<f64, SamplingError> {
    if dist.len() < 2 {
        return Err(SamplingError::EmptyDistribution);
    }
    let mut sorted = dist.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    Ok(sorted[0] - sorted[1])
}

/// `1 - max detection score`; 1 when there are no detections.
pub fn baseline_least_confidence(out: &DetectorOutput) -> UncertaintyScore {
    let top = out.detections.iter().map(|d| d.score).fold(0.0, f64::max);
    UncertaintyScore {
        image_id: out.image_id.clone(),
        value: 1.0 - top,
        method: Method::Lc,
    }
}

/// Sum over detections of `|2p - 1|`. Lower means more informative.
pub fn baseline_margin(out: &DetectorOutput) -> UncertaintyScore {
    UncertaintyScore {
        image_id: out.image_id.clone(),
        value: out.detections.iter().map(|d| (2.0 * d.score - 1.0).abs()).sum(),
        method: Method::Mar,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Sum,
    Max,
}

/// Binary entropy of each detection, combined by `agg`; 0 with no detections.
pub fn baseline_entropy(out: &DetectorOutput, agg: Aggregation) -> UncertaintyScore {
    let per_box = out.detections.iter().map(|d| xlog2x(d.score) + xlog2x(1.0 - d.score));
    let value = match agg {
        Aggregation::Sum => per_box.sum(),
        Aggregation::Max => per_box.fold(0.0, f64::max),
    };
    UncertaintyScore {
        image_id: out.image_id.clone(),
        value,
        method: Method::Ent,
    }
}

/// Weights and aggregation knobs for the scorers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub entropy_aggregation: Aggregation,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 4.0,
            entropy_aggregation: Aggregation::Sum,
        }
    }
}

/// Scores one image with `method`. Point-supervised methods need `weak`;
/// `rand` scores 0 (selection ignores it).
pub fn score_image(
    method: Method,
    out: &DetectorOutput,
    weak: Option<&WeakLabelSet>,
    params: &RpfParams,
    cfg: &ScoringConfig,
) -> Result<UncertaintyScore, SamplingError> {
    let filtered = || {
        weak.map(|w| rpf(&out.proposals, w, params))
            .ok_or_else(|| SamplingError::MissingWeakLabels(method, out.image_id.clone()))
    };
    Ok(match method {
        Method::Mv => max_variance(&filtered()?),
        Method::Me => max_entropy(&filtered()?),
        Method::Mev => max_ent_var(&filtered()?, cfg.lambda1, cfg.lambda2),
        Method::Lc => baseline_least_confidence(out),
        Method::Mar => baseline_margin(out),
        Method::Ent => baseline_entropy(out, cfg.entropy_aggregation),
        Method::Rand => UncertaintyScore {
            image_id: out.image_id.clone(),
            value: 0.0,
            method: Method::Rand,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionOrder {
    Descending,
    Ascending,
    Random,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    pub ids: Vec<String>,
    /// Fewer than `k` candidates were available, so all were returned.
    pub truncated: bool,
}

/// Picks `k` image ids. Scored orders break ties by image id ascending;
/// `Random` samples without replacement from the id-sorted candidates using
/// `rng`, which is the only case that draws from it.
pub fn select_top_k<R: Rng + ?Sized>(
    scores: &[UncertaintyScore],
    k: usize,
    order: SelectionOrder,
    rng: &mut R,
) -> Result<Selection, SamplingError> {
    if k == 0 {
        return Err(SamplingError::InvalidK);
    }
    let truncated = k > scores.len();
    let mut ranked: Vec<&UncertaintyScore> = scores.iter().collect();
    let by_id = |a: &&UncertaintyScore, b: &&UncertaintyScore| a.image_id.cmp(&b.image_id);
    let ids = match order {
        SelectionOrder::Random => {
            ranked.sort_by(by_id);
            ranked
                .choose_multiple(rng, k.min(ranked.len()))
                .map(|s| s.image_id.clone())
                .collect()
        }
        SelectionOrder::Descending | SelectionOrder::Ascending => {
            ranked.sort_by(|a, b| {
                let primary = match order {
                    SelectionOrder::Descending => b.value.total_cmp(&a.value),
                    _ => a.value.total_cmp(&b.value),
                };
                match primary {
                    Ordering::Equal => by_id(a, b),
                    other => other,
                }
            });
            ranked.iter().take(k).map(|s| s.image_id.clone()).collect()
        }
    };
    Ok(Selection { ids, truncated })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::ScoredBox;
    use crate::geometry::BoundingBox;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn prop(x0: f64, y0: f64, x1: f64, y1: f64, s: f64) -> RegionProposal {
        ScoredBox::new(BoundingBox::new(x0, y0, x1, y1).unwrap(), s).unwrap()
    }

    fn weak(clicks: &[(f64, f64)]) -> WeakLabelSet {
        WeakLabelSet {
            image_id: "img".into(),
            clicks: clicks.iter().map(|&(x, y)| ClickPoint::new(x, y).unwrap()).collect(),
        }
    }

    fn fp(per_click: Vec<Vec<f64>>) -> FilteredProposals {
        FilteredProposals {
            image_id: "img".into(),
            per_click,
        }
    }

    fn dets(scores: &[f64]) -> DetectorOutput {
        DetectorOutput {
            image_id: "img".into(),
            proposals: vec![],
            detections: scores
                .iter()
                .enumerate()
                .map(|(i, &s)| prop(i as f64 * 20.0, 0.0, i as f64 * 20.0 + 10.0, 10.0, s))
                .collect(),
        }
    }

    #[test]
    fn rpf_examples() {
        let params = RpfParams::new(10.0, 400.0).unwrap();
        let a = prop(40.0, 40.0, 60.0, 60.0, 0.7);
        let b = prop(0.0, 0.0, 200.0, 200.0, 0.6);
        let c = prop(55.0, 55.0, 75.0, 75.0, 0.5);
        let out = rpf(&[a, b, c], &weak(&[(50.0, 50.0)]), &params);
        assert_eq!(out.per_click, vec![vec![0.7]]);

        let shared = prop(0.0, 0.0, 20.0, 20.0, 0.9);
        let out = rpf(&[shared], &weak(&[(8.0, 10.0), (12.0, 10.0)]), &params);
        assert_eq!(out.per_click, vec![Vec::<f64>::new(), vec![]]);

        let out = rpf(&[], &weak(&[(1.0, 1.0), (2.0, 2.0)]), &params);
        assert_eq!(out.per_click.len(), 2);
        assert!(out.per_click.iter().all(|v| v.is_empty()));
        assert!(rpf(&[a], &weak(&[]), &params).per_click.is_empty());
    }

    #[test]
    fn binary_entropy_values() {
        assert_eq!(binary_entropy(0.5).unwrap(), 1.0);
        assert_eq!(binary_entropy(0.0).unwrap(), 0.0);
        assert_eq!(binary_entropy(1.0).unwrap(), 0.0);
        assert_abs_diff_eq!(binary_entropy(0.9).unwrap(), 0.4689956, epsilon = 1e-6);
        assert!(binary_entropy(1.01).is_err());
        assert!(binary_entropy(-0.1).is_err());
    }

    #[test]
    fn variance_metric_examples() {
        assert_eq!(max_variance(&fp(vec![vec![0.5; 5]])).value, 0.0);
        assert_eq!(max_variance(&fp(vec![vec![0.0, 1.0]])).value, 0.25);
        assert_abs_diff_eq!(
            max_variance(&fp(vec![vec![0.2, 0.4], vec![0.1, 0.9]])).value,
            0.16,
            epsilon = 1e-12
        );
        assert_eq!(max_variance(&fp(vec![])).value, 0.0);
    }

    #[test]
    fn entropy_metric_examples() {
        assert_eq!(max_entropy(&fp(vec![vec![0.5; 5]])).value, 1.0);
        assert_eq!(max_entropy(&fp(vec![vec![0.0; 3]])).value, 0.0);
        assert_eq!(max_entropy(&fp(vec![vec![0.5], vec![0.9, 0.9]])).value, 1.0);
        assert_abs_diff_eq!(max_entropy(&fp(vec![vec![0.9, 0.9]])).value, 0.4689956, epsilon = 1e-6);
    }

    #[test]
    fn ent_var_examples() {
        assert_eq!(max_ent_var(&fp(vec![vec![0.5; 5]]), 1.0, 4.0).value, 1.0);
        assert_eq!(max_ent_var(&fp(vec![vec![0.0, 1.0]]), 1.0, 4.0).value, 1.0);
        assert_eq!(max_ent_var(&fp(vec![]), 1.0, 4.0).value, 0.0);
        // combined per click before the max: click 1 = 0.469 + 0, click 2 = 0 + 0.64
        let f = fp(vec![vec![0.9, 0.9], vec![0.1, 0.9]]);
        let h = binary_entropy(0.1).unwrap();
        assert_abs_diff_eq!(max_ent_var(&f, 1.0, 4.0).value, h + 4.0 * 0.16, epsilon = 1e-12);
    }

    #[test]
    fn table_two_distributions() {
        let y1 = [0.05, 0.5, 0.2, 0.05, 0.2];
        let y2 = [0.02, 0.5, 0.2, 0.03, 0.15];
        let y3 = [0.1, 0.5, 0.2, 0.1, 0.1];
        assert_abs_diff_eq!(categorical_entropy(&y1).unwrap(), 1.860964, epsilon = 1e-6);
        assert_abs_diff_eq!(categorical_entropy(&y3).unwrap(), 1.960964, epsilon = 1e-6);
        // the second vector sums to 0.9; entropy on it as printed
        assert!(matches!(categorical_entropy(&y2), Err(SamplingError::NotNormalized(_))));
        assert_abs_diff_eq!(categorical_entropy_unnormalized(&y2).unwrap(), 1.639574, epsilon = 1e-6);
        let y2_completed = [0.02, 0.5, 0.2, 0.03, 0.15, 0.10];
        assert_abs_diff_eq!(categorical_entropy(&y2_completed).unwrap(), 1.971767, epsilon = 1e-6);
        for y in [&y1[..], &y2[..], &y3[..]] {
            assert_eq!(least_confidence_of(y).unwrap(), 0.5);
            assert_abs_diff_eq!(margin_of(y).unwrap(), 0.3, epsilon = 1e-15);
        }
        assert_eq!(categorical_entropy(&[0.25; 4]).unwrap(), 2.0);
    }

    #[test]
    fn baseline_examples() {
        assert_eq!(baseline_least_confidence(&dets(&[0.5])).value, 0.5);
        assert_abs_diff_eq!(
            baseline_least_confidence(&dets(&[0.99, 0.3])).value,
            0.01,
            epsilon = 1e-12
        );
        assert_eq!(baseline_least_confidence(&dets(&[])).value, 1.0);

        assert_eq!(baseline_margin(&dets(&[0.5])).value, 0.0);
        assert_abs_diff_eq!(baseline_margin(&dets(&[0.9, 0.6])).value, 1.0, epsilon = 1e-12);

        assert_eq!(baseline_entropy(&dets(&[0.5]), Aggregation::Sum).value, 1.0);
        assert_eq!(baseline_entropy(&dets(&[0.5, 0.5]), Aggregation::Sum).value, 2.0);
        assert_eq!(baseline_entropy(&dets(&[0.5, 0.5]), Aggregation::Max).value, 1.0);
        assert_eq!(baseline_entropy(&dets(&[]), Aggregation::Sum).value, 0.0);
    }

    fn us(id: &str, v: f64) -> UncertaintyScore {
        UncertaintyScore {
            image_id: id.into(),
            value: v,
            method: Method::Me,
        }
    }

    #[test]
    fn top_k_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = [us("a", 0.9), us("b", 0.1)];
        assert_eq!(
            select_top_k(&s, 1, SelectionOrder::Descending, &mut rng).unwrap().ids,
            ["a"]
        );
        assert_eq!(
            select_top_k(&s, 1, SelectionOrder::Ascending, &mut rng).unwrap().ids,
            ["b"]
        );
        let tie = [us("b", 0.5), us("a", 0.5)];
        assert_eq!(
            select_top_k(&tie, 1, SelectionOrder::Descending, &mut rng).unwrap().ids,
            ["a"]
        );
        let all = select_top_k(&s, 2, SelectionOrder::Descending, &mut rng).unwrap();
        assert_eq!((all.ids, all.truncated), (vec!["a".to_string(), "b".into()], false));
        let over = select_top_k(&s, 5, SelectionOrder::Descending, &mut rng).unwrap();
        assert!(over.truncated);
        assert_eq!(over.ids.len(), 2);
        assert_eq!(
            select_top_k(&s, 0, SelectionOrder::Descending, &mut rng),
            Err(SamplingError::InvalidK)
        );
    }

    #[test]
    fn random_selection_is_seeded_and_order_free() {
        let scores: Vec<_> = (0..30).map(|i| us(&format!("i{i:02}"), i as f64)).collect();
        let mut reversed = scores.clone();
        reversed.reverse();
        let pick = |s: &[UncertaintyScore]| {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            select_top_k(s, 7, SelectionOrder::Random, &mut rng).unwrap().ids
        };
        let a = pick(&scores);
        assert_eq!(a, pick(&reversed));
        assert_eq!(a.len(), 7);
        let mut dedup = a.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), 7);
    }

    #[test]
    fn strategy_parsing() {
        assert_eq!(
            "lc_mv".parse::<QueryStrategy>().unwrap(),
            QueryStrategy::PointSupervised {
                weak: Method::Lc,
                strong: Method::Mv
            }
        );
        assert_eq!(
            "ent".parse::<QueryStrategy>().unwrap(),
            QueryStrategy::Baseline(Method::Ent)
        );
        assert_eq!("rand_mev".parse::<QueryStrategy>().unwrap().to_string(), "rand_mev");
        for bad in ["mv", "mv_lc", "lc_ent", "foo", "lc_", "x_mv"] {
            assert!(bad.parse::<QueryStrategy>().is_err(), "{bad}");
        }
        let set = QueryStrategy::comparison_set();
        assert_eq!(set.len(), 7);
        let json = serde_json::to_string(&set[6]).unwrap();
        assert_eq!(json, "\"ent_mev\"");
        assert_eq!(serde_json::from_str::<QueryStrategy>(&json).unwrap(), set[6]);
    }

    #[test]
    fn score_image_requires_clicks_for_point_methods() {
        let out = dets(&[0.5]);
        let p = RpfParams::new(10.0, 400.0).unwrap();
        let cfg = ScoringConfig::default();
        assert!(matches!(
            score_image(Method::Mev, &out, None, &p, &cfg),
            Err(SamplingError::MissingWeakLabels(Method::Mev, _))
        ));
        assert_eq!(score_image(Method::Lc, &out, None, &p, &cfg).unwrap().value, 0.5);
    }

    /// Direct evaluation of the four filter predicates over every pair.
    fn rpf_brute_force(proposals: &[RegionProposal], w: &WeakLabelSet, p: &RpfParams) -> Vec<Vec<f64>> {
        let mut out = vec![Vec::new(); w.clicks.len()];
        for prop in proposals {
            for (i, c) in w.clicks.iter().enumerate() {
                let contains = prop.bbox.contains(c);
                let near = prop.bbox.center().distance(c) <= p.epsilon;
                let small = prop.bbox.area() <= p.alpha;
                let exclusive = w
                    .clicks
                    .iter()
                    .enumerate()
                    .all(|(j, other)| j == i || !prop.bbox.contains(other));
                if contains && near && small && exclusive {
                    out[i].push(prop.score);
                }
            }
        }
        out
    }

    fn arb_instance() -> impl Strategy<Value = (Vec<RegionProposal>, WeakLabelSet, RpfParams)> {
        let proposals = prop::collection::vec(
            (0.0f64..90.0, 0.0f64..90.0, 1.0f64..40.0, 1.0f64..40.0, 0.0f64..=1.0),
            0..30,
        )
        .prop_map(|v| {
            v.into_iter()
                .map(|(x, y, w, h, s)| prop(x, y, x + w, y + h, s))
                .collect()
        });
        // integer-valued clicks land on box edges often enough to exercise closedness
        let clicks = prop::collection::vec((0u32..100, 0u32..100), 0..6)
            .prop_map(|v| weak(&v.into_iter().map(|(x, y)| (x as f64, y as f64)).collect::<Vec<_>>()));
        let params = (1.0f64..30.0, 10.0f64..1600.0).prop_map(|(e, a)| RpfParams::new(e, a).unwrap());
        (proposals, clicks, params)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(500))]

        #[test]
        fn rpf_matches_brute_force((props, w, p) in arb_instance()) {
            prop_assert_eq!(rpf(&props, &w, &p).per_click, rpf_brute_force(&props, &w, &p));
        }

        #[test]
        fn metric_bounds(per_click in prop::collection::vec(prop::collection::vec(0.0f64..=1.0, 0..12), 0..5)) {
            let f = fp(per_click);
            let v = max_variance(&f).value;
            let e = max_entropy(&f).value;
            let ev = max_ent_var(&f, 1.0, 4.0).value;
            prop_assert!((0.0..=0.25).contains(&v));
            prop_assert!((0.0..=1.0).contains(&e));
            prop_assert!((0.0..=1.0).contains(&(4.0 * v)));
            prop_assert!((0.0..=2.0).contains(&ev));
        }

        #[test]
        fn metrics_are_permutation_invariant(
            scores in prop::collection::vec(0.0f64..=1.0, 1..12),
            rot in 0usize..12,
        ) {
            let mut perm = scores.clone();
            perm.rotate_left(rot % scores.len());
            perm.reverse();
            let (a, b) = (fp(vec![scores.clone()]), fp(vec![perm.clone()]));
            prop_assert!((max_variance(&a).value - max_variance(&b).value).abs() < 1e-12);
            prop_assert!((max_entropy(&a).value - max_entropy(&b).value).abs() < 1e-12);
            let (da, db) = (dets(&scores), dets(&perm));
            prop_assert_eq!(baseline_least_confidence(&da).value, baseline_least_confidence(&db).value);
            prop_assert!((baseline_margin(&da).value - baseline_margin(&db).value).abs() < 1e-12);
            prop_assert!(
                (baseline_entropy(&da, Aggregation::Sum).value - baseline_entropy(&db, Aggregation::Sum).value).abs() < 1e-12
            );
        }
    }
}
