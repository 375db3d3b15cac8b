//! The two-stage active-learning loop.
//!
//! Each episode moves up to `b_w` images from the unlabeled pool into the
//! weak pool (clicks only), then up to `b_s` images from the whole weak pool
//! into the labeled pool (boxes), retrains, and spends `b_w + b_s` budget.
//! One-stage baselines skip the weak pool and label straight from the
//! unlabeled pool.
//!
//! [`Engine`] exposes the loop as explicit phases so an external annotator
//! can drive it; [`Engine::run`] drives it with an in-process [`Oracle`].

mod config;
mod log;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::{IndexedRandom, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetError, DatasetManifest, ImageRecord};
use crate::detector::{Detector, DetectorError, LabeledImage, ModelState};
use crate::eval::{evaluate, EvalError, EvalSnapshot};
use crate::geometry::BoundingBox;
use crate::oracle::{CostLedger, CostMode, LedgerEvent, Oracle, OracleError};
use crate::sampling::{score_image, select_top_k, Method, SamplingError, UncertaintyScore, WeakLabelSet};
use crate::seed;

pub use config::{BaselineThroughput, DatasetSource, DetectorConfig, RunConfig};
pub use log::{read_run_log, EpisodeLog, PoolSizes, RunHeader, RunLog, RunLogWriter, RUN_LOG_FORMAT_VERSION};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid run config: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("engine is in phase {actual}, expected {expected}")]
    Phase { expected: &'static str, actual: Phase },
    #[error("no episode can start: {0}")]
    Exhausted(&'static str),
    #[error("invalid annotation batch: {0}")]
    Submission(String),
    #[error("run log integrity error: {0}")]
    Integrity(String),
    #[error("pool invariant violated: {0}")]
    Invariant(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Where the loop is waiting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Between episodes.
    Idle,
    /// Waiting for clicks on the stage-1 images.
    Type1,
    /// Waiting for boxes on the stage-2 images.
    Type2,
    /// Waiting for boxes drawn from scratch (one-stage baselines).
    Full,
    Done,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Phase::Idle => "idle",
            Phase::Type1 => "type1",
            Phase::Type2 => "type2",
            Phase::Full => "full",
            Phase::Done => "done",
        };
        f.write_str(s)
    }
}

/// The labeled / weak / unlabeled partition and everything annotated so far.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolState {
    pub labeled: BTreeSet<String>,
    pub weak: BTreeSet<String>,
    pub unlabeled: BTreeSet<String>,
    /// Labeled from the start with ground-truth boxes.
    pub initial: BTreeSet<String>,
    pub weak_labels: BTreeMap<String, WeakLabelSet>,
    pub strong_labels: BTreeMap<String, Vec<BoundingBox>>,
    pub budget_remaining: u64,
}

impl PoolState {
    pub fn sizes(&self) -> PoolSizes {
        PoolSizes {
            labeled: self.labeled.len(),
            weak: self.weak.len(),
            unlabeled: self.unlabeled.len(),
        }
    }

    /// Disjointness, conservation of `total`, and label coverage.
    pub fn check_invariants(&self, total: usize) -> Result<(), EngineError> {
        let fail = |m: String| Err(EngineError::Invariant(m));
        if let Some(id) = self.labeled.intersection(&self.weak).next() {
            return fail(format!("{id} is both labeled and weak"));
        }
        if let Some(id) = self.labeled.intersection(&self.unlabeled).next() {
            return fail(format!("{id} is both labeled and unlabeled"));
        }
        if let Some(id) = self.weak.intersection(&self.unlabeled).next() {
            return fail(format!("{id} is both weak and unlabeled"));
        }
        let sum = self.labeled.len() + self.weak.len() + self.unlabeled.len();
        if sum != total {
            return fail(format!("pools hold {sum} images, expected {total}"));
        }
        if let Some(id) = self.weak.iter().find(|id| !self.weak_labels.contains_key(*id)) {
            return fail(format!("weak image {id} has no clicks"));
        }
        if let Some(id) = self
            .labeled
            .iter()
            .find(|id| !self.initial.contains(*id) && !self.strong_labels.contains_key(*id))
        {
            return fail(format!("labeled image {id} has no boxes"));
        }
        Ok(())
    }

    fn apply_weak(&mut self, labels: &[WeakLabelSet], ledger: &mut CostLedger) -> Result<(), EngineError> {
        for w in labels {
            if !self.unlabeled.remove(&w.image_id) {
                return Err(EngineError::Integrity(format!("{} is not unlabeled", w.image_id)));
            }
            self.weak.insert(w.image_id.clone());
            self.weak_labels.insert(w.image_id.clone(), w.clone());
        }
        ledger.update(LedgerEvent::Weak {
            images: labels.len(),
            objects: labels.iter().map(|w| w.clicks.len()).sum(),
        })?;
        Ok(())
    }

    /// Moves boxed images into the labeled pool, from the weak pool for
    /// two-stage runs and from the unlabeled pool for baselines.
    fn apply_strong(
        &mut self,
        order: &[String],
        boxes: &BTreeMap<String, Vec<BoundingBox>>,
        ledger: &mut CostLedger,
    ) -> Result<(), EngineError> {
        let from_weak = ledger.mode == CostMode::Proposed;
        if order.len() != boxes.len() || order.iter().any(|id| !boxes.contains_key(id)) {
            return Err(EngineError::Integrity(
                "strong labels do not match the queried images".into(),
            ));
        }
        for id in order {
            let source = if from_weak { &mut self.weak } else { &mut self.unlabeled };
            if !source.remove(id) {
                let pool = if from_weak { "weak" } else { "unlabeled" };
                return Err(EngineError::Integrity(format!("{id} is not {pool}")));
            }
            self.labeled.insert(id.clone());
            self.strong_labels.insert(id.clone(), boxes[id].clone());
        }
        let images = order.len();
        let objects = boxes.values().map(Vec::len).sum();
        ledger.update(if from_weak {
            LedgerEvent::Strong { images, objects }
        } else {
            LedgerEvent::Baseline { images, objects }
        })?;
        Ok(())
    }
}

/// Seeded train/test split: returns (active-learning ids, test ids), each
/// sorted. The test share is `round(n * test_fraction)`.
pub fn split_dataset(manifest: &DatasetManifest, test_fraction: f64, seed: u64) -> (Vec<String>, Vec<String>) {
    let mut ids: Vec<String> = manifest.images.iter().map(|i| i.id.clone()).collect();
    ids.sort();
    let mut rng = seed::stream(seed, "split", &manifest.name, 0);
    ids.shuffle(&mut rng);
    let n_test = ((ids.len() as f64) * test_fraction).round() as usize;
    let mut test = ids[..n_test].to_vec();
    let mut al = ids[n_test..].to_vec();
    test.sort();
    al.sort();
    (al, test)
}

fn choose_initial(al: &[String], count: usize, seed: u64) -> Result<BTreeSet<String>, EngineError> {
    if count > al.len() {
        return Err(EngineError::Config(format!(
            "initial_labeled {count} exceeds the {} images available for active learning",
            al.len()
        )));
    }
    let mut rng = seed::stream(seed, "initial", "", 0);
    Ok(al.choose_multiple(&mut rng, count).cloned().collect())
}

/// State rebuilt from a run log.
#[derive(Debug, Clone, PartialEq)]
pub struct Replay {
    pub pool: PoolState,
    pub ledger: CostLedger,
    /// Number of completed episodes.
    pub episodes: u32,
    pub last_checksum: String,
    pub last_eval: Option<EvalSnapshot>,
}

/// Re-applies every logged transition to a fresh partition, checking the
/// checksum chain and that pools, ledger, and budget match each record.
pub fn replay(header: &RunHeader, logs: &[EpisodeLog], manifest: &DatasetManifest) -> Result<Replay, EngineError> {
    header.verify()?;
    if manifest.content_hash() != header.manifest_hash {
        return Err(EngineError::Integrity("manifest does not match the run log".into()));
    }
    let cfg = &header.config;
    let (al, _) = split_dataset(manifest, cfg.test_fraction, cfg.seed);
    let initial = choose_initial(&al, cfg.initial_labeled, cfg.seed)?;
    let first = logs
        .first()
        .ok_or_else(|| EngineError::Integrity("run log has no initial record".into()))?;
    first.verify(&header.checksum)?;
    if first.episode != 0 || first.queried_strong.iter().cloned().collect::<BTreeSet<_>>() != initial {
        return Err(EngineError::Integrity(
            "initial labeled pool differs from the configured split".into(),
        ));
    }
    let mode = if cfg.method.is_baseline() {
        CostMode::Baseline
    } else {
        CostMode::Proposed
    };
    let mut ledger = CostLedger::new(mode);
    let mut pool = PoolState {
        unlabeled: al.iter().filter(|id| !initial.contains(*id)).cloned().collect(),
        labeled: initial.clone(),
        weak: BTreeSet::new(),
        initial,
        weak_labels: BTreeMap::new(),
        strong_labels: BTreeMap::new(),
        budget_remaining: cfg.budget,
    };
    let check = |log: &EpisodeLog, pool: &PoolState, ledger: &CostLedger| {
        if log.pools != pool.sizes() || log.budget_remaining != pool.budget_remaining || &log.ledger != ledger {
            return Err(EngineError::Integrity(format!(
                "episode {} does not match its replayed state",
                log.episode
            )));
        }
        pool.check_invariants(al.len())
    };
    check(first, &pool, &ledger)?;
    let mut prev = first.checksum.clone();
    for (i, log) in logs.iter().enumerate().skip(1) {
        log.verify(&prev)?;
        if log.episode as usize != i {
            return Err(EngineError::Integrity(format!(
                "expected episode {i}, found {}",
                log.episode
            )));
        }
        if mode == CostMode::Proposed {
            let ids: Vec<&String> = log.weak_labels.iter().map(|w| &w.image_id).collect();
            if ids != log.queried_weak.iter().collect::<Vec<_>>() {
                return Err(EngineError::Integrity(format!(
                    "episode {i}: clicks do not match queried images"
                )));
            }
            pool.apply_weak(&log.weak_labels, &mut ledger)?;
        } else if !log.queried_weak.is_empty() {
            return Err(EngineError::Integrity(format!(
                "episode {i}: baseline run with weak queries"
            )));
        }
        pool.apply_strong(&log.queried_strong, &log.strong_labels, &mut ledger)?;
        pool.budget_remaining = pool.budget_remaining.saturating_sub(cfg.budget_per_episode());
        check(log, &pool, &ledger)?;
        prev = log.checksum.clone();
    }
    let last = logs.last().expect("non-empty");
    Ok(Replay {
        pool,
        ledger,
        episodes: last.episode,
        last_checksum: last.checksum.clone(),
        last_eval: last.eval.clone(),
    })
}

#[derive(Debug, Default)]
struct Draft {
    queried_weak: Vec<String>,
    weak_uncertainty: BTreeMap<String, f64>,
    weak_labels: Vec<WeakLabelSet>,
    queried_strong: Vec<String>,
    strong_uncertainty: BTreeMap<String, f64>,
    durations: BTreeMap<String, u64>,
    annotators: BTreeMap<String, String>,
    started: Option<Instant>,
}

/// A snapshot for status displays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineStatus {
    /// Completed episodes.
    pub episode: u32,
    pub phase: Phase,
    pub pending: usize,
    pub pools: PoolSizes,
    pub budget_remaining: u64,
    pub ledger: CostLedger,
    pub map_at_50: Option<f64>,
}

pub struct Engine {
    config: RunConfig,
    manifest: Arc<DatasetManifest>,
    index: HashMap<String, usize>,
    detector: Arc<dyn Detector>,
    al_size: usize,
    test_ids: Vec<String>,
    pool: PoolState,
    ledger: CostLedger,
    model: ModelState,
    episode: u32,
    phase: Phase,
    pending: Vec<String>,
    draft: Draft,
    header: RunHeader,
    last_checksum: String,
    last_eval: Option<EvalSnapshot>,
}

impl fmt::Debug for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Engine")
            .field("method", &self.config.method)
            .field("episode", &self.episode)
            .field("phase", &self.phase)
            .field("pools", &self.pool.sizes())
            .finish()
    }
}

impl Engine {
    /// Splits the dataset, seeds the labeled pool, trains the first model,
    /// and returns the episode-0 record.
    pub fn new(
        config: RunConfig,
        manifest: Arc<DatasetManifest>,
        detector: Arc<dyn Detector>,
    ) -> Result<(Self, EpisodeLog), EngineError> {
        config.validate()?;
        manifest.validate()?;
        let started = Instant::now();
        let (al, test_ids) = split_dataset(&manifest, config.test_fraction, config.seed);
        let initial = choose_initial(&al, config.initial_labeled, config.seed)?;
        let header = RunHeader {
            format_version: RUN_LOG_FORMAT_VERSION,
            config: config.clone(),
            manifest_name: manifest.name.clone(),
            manifest_hash: manifest.content_hash(),
            dataset_images: manifest.images.len(),
            test_images: test_ids.len(),
            checksum: String::new(),
        }
        .seal();
        let pool = PoolState {
            unlabeled: al.iter().filter(|id| !initial.contains(*id)).cloned().collect(),
            labeled: initial.clone(),
            weak: BTreeSet::new(),
            initial,
            weak_labels: BTreeMap::new(),
            strong_labels: BTreeMap::new(),
            budget_remaining: config.budget,
        };
        let mode = if config.method.is_baseline() {
            CostMode::Baseline
        } else {
            CostMode::Proposed
        };
        let mut engine = Self::assemble(config, manifest, detector, al.len(), test_ids, pool, mode, header)?;
        engine.draft.started = Some(started);
        engine.retrain(0)?;
        engine.last_eval = engine.evaluate()?;
        engine.last_checksum = engine.header.checksum.clone();
        let initial_ids: Vec<String> = engine.pool.initial.iter().cloned().collect();
        let log = engine.close_record(0, Vec::new(), initial_ids, BTreeMap::new());
        engine.phase = engine.idle_or_done();
        Ok((engine, log))
    }

    /// Rebuilds an engine from a run log and retrains the latest model. A
    /// log holding only a header starts the run afresh and returns its
    /// episode-0 record.
    pub fn resume(
        log: &RunLog,
        manifest: Arc<DatasetManifest>,
        detector: Arc<dyn Detector>,
    ) -> Result<(Self, Option<EpisodeLog>), EngineError> {
        log.header.verify()?;
        if log.episodes.is_empty() {
            if manifest.content_hash() != log.header.manifest_hash {
                return Err(EngineError::Integrity("manifest does not match the run log".into()));
            }
            let (engine, first) = Self::new(log.header.config.clone(), manifest, detector)?;
            return Ok((engine, Some(first)));
        }
        let state = replay(&log.header, &log.episodes, &manifest)?;
        let config = log.header.config.clone();
        let (al, test_ids) = split_dataset(&manifest, config.test_fraction, config.seed);
        let mut engine = Self::assemble(
            config,
            manifest,
            detector,
            al.len(),
            test_ids,
            state.pool,
            state.ledger.mode,
            log.header.clone(),
        )?;
        engine.ledger = state.ledger;
        engine.episode = state.episodes;
        engine.retrain(state.episodes)?;
        engine.last_eval = state.last_eval;
        engine.last_checksum = state.last_checksum;
        engine.phase = engine.idle_or_done();
        Ok((engine, None))
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        config: RunConfig,
        manifest: Arc<DatasetManifest>,
        detector: Arc<dyn Detector>,
        al_size: usize,
        test_ids: Vec<String>,
        pool: PoolState,
        mode: CostMode,
        header: RunHeader,
    ) -> Result<Self, EngineError> {
        let index = manifest
            .images
            .iter()
            .enumerate()
            .map(|(i, img)| (img.id.clone(), i))
            .collect();
        Ok(Self {
            config,
            manifest,
            index,
            detector,
            al_size,
            test_ids,
            pool,
            ledger: CostLedger::new(mode),
            model: ModelState {
                model_id: String::new(),
                round: 0,
                trained_on: 0,
                skill: None,
            },
            episode: 0,
            phase: Phase::Idle,
            pending: Vec::new(),
            draft: Draft::default(),
            header,
            last_checksum: String::new(),
            last_eval: None,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn header(&self) -> &RunHeader {
        &self.header
    }

    pub fn manifest(&self) -> &Arc<DatasetManifest> {
        &self.manifest
    }

    pub fn pool(&self) -> &PoolState {
        &self.pool
    }

    pub fn ledger(&self) -> &CostLedger {
        &self.ledger
    }

    pub fn model(&self) -> &ModelState {
        &self.model
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    /// Image ids awaiting annotation in the current phase, in query order.
    pub fn pending(&self) -> &[String] {
        &self.pending
    }

    pub fn episodes_completed(&self) -> u32 {
        self.episode
    }

    pub fn test_ids(&self) -> &[String] {
        &self.test_ids
    }

    pub fn last_eval(&self) -> Option<&EvalSnapshot> {
        self.last_eval.as_ref()
    }

    pub fn image(&self, id: &str) -> Option<&ImageRecord> {
        self.index.get(id).map(|&i| &self.manifest.images[i])
    }

    pub fn status(&self) -> EngineStatus {
        EngineStatus {
            episode: self.episode,
            phase: self.phase,
            pending: self.pending.len(),
            pools: self.pool.sizes(),
            budget_remaining: self.pool.budget_remaining,
            ledger: self.ledger.clone(),
            map_at_50: self.last_eval.as_ref().map(|e| e.map_at_50),
        }
    }

    /// Why no further episode can start, if that is the case.
    pub fn stop_reason(&self) -> Option<&'static str> {
        if self.pool.budget_remaining == 0 {
            Some("budget exhausted")
        } else if self.pool.unlabeled.is_empty() {
            Some("unlabeled pool exhausted")
        } else if self.config.episode_cap.is_some_and(|cap| self.episode >= cap) {
            Some("episode cap reached")
        } else {
            None
        }
    }

    pub fn can_continue(&self) -> bool {
        self.stop_reason().is_none()
    }

    fn idle_or_done(&self) -> Phase {
        if self.can_continue() {
            Phase::Idle
        } else {
            Phase::Done
        }
    }

    fn expect_phase(&self, expected: &'static str, ok: bool) -> Result<(), EngineError> {
        if ok {
            Ok(())
        } else {
            Err(EngineError::Phase {
                expected,
                actual: self.phase,
            })
        }
    }

    fn retrain(&mut self, round: u32) -> Result<(), EngineError> {
        let labeled: Vec<LabeledImage<'_>> = self
            .pool
            .labeled
            .iter()
            .map(|id| {
                let image = &self.manifest.images[self.index[id]];
                let boxes = match self.pool.strong_labels.get(id) {
                    Some(b) => b.as_slice(),
                    None => image.objects.as_slice(),
                };
                LabeledImage { image, boxes }
            })
            .collect();
        let model = self.detector.train(&labeled, round)?;
        ::log::debug!("trained {} on {} images", model.model_id, labeled.len());
        self.model = model;
        Ok(())
    }

    fn evaluate(&self) -> Result<Option<EvalSnapshot>, EngineError> {
        if self.test_ids.is_empty() {
            return Ok(None);
        }
        let images: Vec<&ImageRecord> = self
            .test_ids
            .iter()
            .map(|id| &self.manifest.images[self.index[id]])
            .collect();
        Ok(Some(evaluate(
            self.detector.as_ref(),
            &self.model,
            &images,
            self.config.iou_threshold,
            self.config.ap_variant,
        )?))
    }

    /// Scores `ids` in parallel; results come back in the order of `ids`.
    fn score(&self, method: Method, ids: &[String]) -> Result<Vec<UncertaintyScore>, EngineError> {
        if method == Method::Rand {
            return Ok(ids
                .iter()
                .map(|id| UncertaintyScore {
                    image_id: id.clone(),
                    value: 0.0,
                    method,
                })
                .collect());
        }
        ids.par_iter()
            .map(|id| {
                let image = &self.manifest.images[self.index[id]];
                let out = self.detector.detect(&self.model, image)?;
                Ok(score_image(
                    method,
                    &out,
                    self.pool.weak_labels.get(id),
                    &self.config.rpf,
                    &self.config.scoring,
                )?)
            })
            .collect()
    }

    fn select(
        &self,
        method: Method,
        candidates: &[String],
        k: usize,
        stage: &str,
    ) -> Result<(Vec<String>, BTreeMap<String, f64>), EngineError> {
        let scores = self.score(method, candidates)?;
        let mut rng = seed::stream(self.config.seed, stage, "", u64::from(self.episode + 1));
        let selection = select_top_k(&scores, k, method.order(), &mut rng)?;
        let mut values = BTreeMap::new();
        if method != Method::Rand {
            let by_id: HashMap<&str, f64> = scores.iter().map(|s| (s.image_id.as_str(), s.value)).collect();
            for id in &selection.ids {
                values.insert(id.clone(), by_id[id.as_str()]);
            }
        }
        Ok((selection.ids, values))
    }

    /// Runs the first-stage query and returns the images to annotate:
    /// clicks for two-stage runs ([`Phase::Type1`]), boxes for baselines
    /// ([`Phase::Full`]).
    pub fn begin_episode(&mut self) -> Result<Vec<String>, EngineError> {
        self.expect_phase("idle", self.phase == Phase::Idle)?;
        if let Some(reason) = self.stop_reason() {
            return Err(EngineError::Exhausted(reason));
        }
        self.draft = Draft {
            started: Some(Instant::now()),
            ..Draft::default()
        };
        let candidates: Vec<String> = self.pool.unlabeled.iter().cloned().collect();
        let k = self.config.first_stage_batch().min(candidates.len());
        let method = self.config.method.first_stage();
        let (ids, values) = self.select(method, &candidates, k, "select-stage1")?;
        if self.config.method.is_baseline() {
            self.draft.queried_strong = ids.clone();
            self.draft.strong_uncertainty = values;
            self.phase = Phase::Full;
        } else {
            self.draft.queried_weak = ids.clone();
            self.draft.weak_uncertainty = values;
            self.phase = Phase::Type1;
        }
        self.pending = ids.clone();
        Ok(ids)
    }

    fn check_batch_ids<'a>(&self, ids: impl Iterator<Item = &'a String>) -> Result<(), EngineError> {
        let given: Vec<&String> = ids.collect();
        let unique: BTreeSet<&String> = given.iter().copied().collect();
        let expected: BTreeSet<&String> = self.pending.iter().collect();
        if unique.len() != given.len() || unique != expected {
            return Err(EngineError::Submission(format!(
                "expected annotations for exactly {} pending images",
                self.pending.len()
            )));
        }
        Ok(())
    }

    /// Records clicks for every pending Type-1 image, then runs the
    /// second-stage query over the whole weak pool and returns the images
    /// to box.
    pub fn submit_weak(&mut self, labels: Vec<WeakLabelSet>) -> Result<Vec<String>, EngineError> {
        self.expect_phase("type1", self.phase == Phase::Type1)?;
        self.check_batch_ids(labels.iter().map(|w| &w.image_id))?;
        for w in &labels {
            let img = self.image(&w.image_id).expect("pending ids exist");
            if let Some(c) = w.clicks.iter().find(|c| !c.within_image(img.width, img.height)) {
                return Err(EngineError::Submission(format!(
                    "click ({}, {}) lies outside image {}",
                    c.x, c.y, img.id
                )));
            }
        }
        let mut by_id: HashMap<String, WeakLabelSet> = labels.into_iter().map(|w| (w.image_id.clone(), w)).collect();
        let ordered: Vec<WeakLabelSet> = self
            .pending
            .iter()
            .map(|id| by_id.remove(id).expect("checked"))
            .collect();
        self.pool.apply_weak(&ordered, &mut self.ledger)?;
        self.draft.weak_labels = ordered;

        let candidates: Vec<String> = self.pool.weak.iter().cloned().collect();
        let k = self.config.b_s.min(candidates.len());
        let strong = match self.config.method {
            crate::sampling::QueryStrategy::PointSupervised { strong, .. } => strong,
            crate::sampling::QueryStrategy::Baseline(_) => unreachable!("baselines never enter type1"),
        };
        let (ids, values) = self.select(strong, &candidates, k, "select-stage2")?;
        self.draft.queried_strong = ids.clone();
        self.draft.strong_uncertainty = values;
        self.phase = Phase::Type2;
        self.pending = ids.clone();
        Ok(ids)
    }

    /// Records boxes for every pending image, retrains, evaluates, and
    /// closes the episode.
    pub fn submit_strong(&mut self, boxes: BTreeMap<String, Vec<BoundingBox>>) -> Result<EpisodeLog, EngineError> {
        self.expect_phase("type2 or full", matches!(self.phase, Phase::Type2 | Phase::Full))?;
        self.check_batch_ids(boxes.keys())?;
        for (id, list) in &boxes {
            let img = self.image(id).expect("pending ids exist");
            if let Some(b) = list.iter().find(|b| !b.within_image(img.width, img.height)) {
                return Err(EngineError::Submission(format!("box {b:?} lies outside image {id}")));
            }
        }
        let order = self.pending.clone();
        self.pool.apply_strong(&order, &boxes, &mut self.ledger)?;
        self.pool.budget_remaining = self
            .pool
            .budget_remaining
            .saturating_sub(self.config.budget_per_episode());
        self.episode += 1;
        self.retrain(self.episode)?;
        self.last_eval = self.evaluate()?;
        self.pool.check_invariants(self.al_size)?;
        let draft = std::mem::take(&mut self.draft);
        let log = {
            let mut log = self.close_record(self.episode, draft.queried_weak, order, boxes);
            log.weak_uncertainty = draft.weak_uncertainty;
            log.strong_uncertainty = draft.strong_uncertainty;
            log.weak_labels = draft.weak_labels;
            log.measured_durations_ms = draft.durations;
            log.annotators = draft.annotators;
            if self.config.record_wall_clock {
                log.wall_clock_ms = draft.started.map(|t| t.elapsed().as_millis() as u64);
            }
            log.seal(&self.last_checksum);
            log
        };
        self.last_checksum = log.checksum.clone();
        self.pending.clear();
        self.phase = self.idle_or_done();
        Ok(log)
    }

    /// Notes how long an annotator spent on a task of the current episode
    /// and who they were; logged, never costed. A repeated key replaces the
    /// earlier entry.
    pub fn record_annotation(&mut self, task: &str, duration_ms: Option<u64>, annotator: Option<&str>) {
        match duration_ms {
            Some(ms) => self.draft.durations.insert(task.to_string(), ms),
            None => self.draft.durations.remove(task),
        };
        match annotator {
            Some(a) => self.draft.annotators.insert(task.to_string(), a.to_string()),
            None => self.draft.annotators.remove(task),
        };
    }

    fn close_record(
        &mut self,
        episode: u32,
        queried_weak: Vec<String>,
        queried_strong: Vec<String>,
        strong_labels: BTreeMap<String, Vec<BoundingBox>>,
    ) -> EpisodeLog {
        let mut log = EpisodeLog {
            episode,
            queried_weak,
            queried_strong,
            weak_uncertainty: BTreeMap::new(),
            strong_uncertainty: BTreeMap::new(),
            weak_labels: Vec::new(),
            strong_labels,
            ledger: self.ledger.clone(),
            eval: self.last_eval.clone(),
            model_id: self.model.model_id.clone(),
            skill: self.model.skill,
            budget_remaining: self.pool.budget_remaining,
            pools: self.pool.sizes(),
            measured_durations_ms: BTreeMap::new(),
            annotators: BTreeMap::new(),
            wall_clock_ms: None,
            checksum: String::new(),
        };
        if episode == 0 {
            if self.config.record_wall_clock {
                log.wall_clock_ms = self.draft.started.map(|t| t.elapsed().as_millis() as u64);
            }
            log.seal(&self.last_checksum);
            self.last_checksum = log.checksum.clone();
        }
        log
    }

    /// One full episode answered by `oracle`.
    pub fn run_episode(&mut self, oracle: &dyn Oracle) -> Result<EpisodeLog, EngineError> {
        let ids = self.begin_episode()?;
        let strong_ids = if self.phase == Phase::Type1 {
            let labels = ids
                .iter()
                .map(|id| oracle.type1(self.image(id).expect("pool ids exist")))
                .collect::<Result<Vec<_>, _>>()?;
            self.submit_weak(labels)?
        } else {
            ids
        };
        let mut boxes = BTreeMap::new();
        for id in &strong_ids {
            let image = self.image(id).expect("pool ids exist");
            let b = if self.phase == Phase::Type2 {
                oracle.type2(image, self.pool.weak_labels.get(id))?
            } else {
                oracle.full(image)?
            };
            boxes.insert(id.clone(), b);
        }
        self.submit_strong(boxes)
    }

    /// Runs episodes until the budget, the unlabeled pool, or the episode
    /// cap runs out. Each record is handed to `sink` as soon as it exists, so
    /// a failure leaves the completed prefix with the caller.
    pub fn run<F>(&mut self, oracle: &dyn Oracle, mut sink: F) -> Result<Vec<EpisodeLog>, EngineError>
    where
        F: FnMut(&EpisodeLog) -> Result<(), EngineError>,
    {
        let mut logs = Vec::new();
        while self.can_continue() {
            let log = self.run_episode(oracle)?;
            sink(&log)?;
            logs.push(log);
        }
        Ok(logs)
    }
}
