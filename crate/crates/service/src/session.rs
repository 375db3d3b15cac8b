//! One run's task queue and phase machine, independent of HTTP.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;

use palps::dataset::ImageRecord;
use palps::engine::{Engine, EngineError, EpisodeLog, Phase, RunHeader, RunLogWriter};
use palps::geometry::{BoundingBox, ClickPoint};
use palps::oracle::CostLedger;
use palps::sampling::{QueryStrategy, WeakLabelSet};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    /// Click each object's center.
    Type1,
    /// Draw a box around each clicked object.
    Type2,
    /// Draw boxes from scratch (one-stage baselines).
    Full,
}

impl TaskKind {
    fn as_str(self) -> &'static str {
        match self {
            TaskKind::Type1 => "type1",
            TaskKind::Type2 => "type2",
            TaskKind::Full => "full",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskState {
    Pending,
    Submitted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub task_id: String,
    pub run_id: String,
    pub episode: u32,
    pub kind: TaskKind,
    /// The image without its ground-truth objects.
    pub image: ImageRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub existing_clicks: Option<Vec<ClickPoint>>,
    pub state: TaskState,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointInput {
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxInput {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

/// Geometry arrives unvalidated so that out-of-bounds values can be
/// reported as such rather than as parse failures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationSubmission {
    pub task_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clicks: Option<Vec<PointInput>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boxes: Option<Vec<BoxInput>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotator_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmissionAck {
    pub task_id: String,
    /// An earlier answer to the same task was overwritten.
    pub replaced: bool,
    /// This submission completed its phase and the run moved on.
    pub phase_advanced: bool,
    pub phase: Phase,
    pub episode: u32,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingCounts {
    pub type1: usize,
    pub type2: usize,
    pub full: usize,
}

/// Pool sizes; the four add up to the dataset size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusPools {
    pub labeled: usize,
    pub weak: usize,
    pub unlabeled: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStatus {
    pub run_id: String,
    pub method: QueryStrategy,
    /// Completed episodes.
    pub episode: u32,
    pub phase: Phase,
    pub pending_counts: PendingCounts,
    pub pools: StatusPools,
    pub budget_remaining: u64,
    pub ledger: CostLedger,
    pub map_at_50: Option<f64>,
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Unprocessable(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, Clone)]
enum Answer {
    Clicks(Vec<ClickPoint>),
    Boxes(Vec<BoundingBox>),
}

pub struct RunSession {
    run_id: String,
    engine: Engine,
    tasks: Vec<AnnotationTask>,
    answers: HashMap<String, Answer>,
    consumed: HashSet<String>,
    header: RunHeader,
    logs: Vec<EpisodeLog>,
    sink: Option<RunLogWriter<File>>,
}

impl RunSession {
    /// Wraps an engine whose records so far are `logs` (already persisted)
    /// and opens the next phase.
    pub fn new(
        run_id: String,
        engine: Engine,
        logs: Vec<EpisodeLog>,
        sink: Option<RunLogWriter<File>>,
    ) -> Result<Self, SessionError> {
        let header = engine.header().clone();
        let mut session = Self {
            run_id,
            engine,
            tasks: Vec::new(),
            answers: HashMap::new(),
            consumed: HashSet::new(),
            header,
            logs,
            sink,
        };
        session.open_phase()?;
        Ok(session)
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn header(&self) -> &RunHeader {
        &self.header
    }

    pub fn logs(&self) -> &[EpisodeLog] {
        &self.logs
    }

    fn open_phase(&mut self) -> Result<(), SessionError> {
        if self.engine.phase() == Phase::Idle && self.engine.can_continue() {
            self.engine.begin_episode()?;
        }
        self.build_tasks();
        Ok(())
    }

    fn build_tasks(&mut self) {
        let kind = match self.engine.phase() {
            Phase::Type1 => TaskKind::Type1,
            Phase::Type2 => TaskKind::Type2,
            Phase::Full => TaskKind::Full,
            Phase::Idle | Phase::Done => {
                self.tasks.clear();
                return;
            }
        };
        let episode = self.engine.episodes_completed() + 1;
        let pool = self.engine.pool();
        self.tasks = self
            .engine
            .pending()
            .iter()
            .map(|id| AnnotationTask {
                task_id: format!("e{episode}-{}-{id}", kind.as_str()),
                run_id: self.run_id.clone(),
                episode,
                kind,
                image: self.engine.image(id).expect("pending ids exist").without_objects(),
                existing_clicks: (kind == TaskKind::Type2)
                    .then(|| pool.weak_labels.get(id).map(|w| w.clicks.clone()).unwrap_or_default()),
                state: TaskState::Pending,
            })
            .collect();
    }

    /// Every task of the current phase, pending and submitted, in queue order.
    pub fn tasks(&self) -> &[AnnotationTask] {
        &self.tasks
    }

    pub fn status(&self) -> RunStatus {
        let mut pending = PendingCounts::default();
        for t in self.tasks.iter().filter(|t| t.state == TaskState::Pending) {
            match t.kind {
                TaskKind::Type1 => pending.type1 += 1,
                TaskKind::Type2 => pending.type2 += 1,
                TaskKind::Full => pending.full += 1,
            }
        }
        let s = self.engine.status();
        RunStatus {
            run_id: self.run_id.clone(),
            method: self.engine.config().method,
            episode: s.episode,
            phase: s.phase,
            pending_counts: pending,
            pools: StatusPools {
                labeled: s.pools.labeled,
                weak: s.pools.weak,
                unlabeled: s.pools.unlabeled,
                test: self.engine.test_ids().len(),
            },
            budget_remaining: s.budget_remaining,
            ledger: s.ledger,
            map_at_50: s.map_at_50,
        }
    }

    fn validate(&self, task: &AnnotationTask, sub: &AnnotationSubmission) -> Result<Answer, SessionError> {
        let bad = |m: String| Err(SessionError::Unprocessable(m));
        let (w, h) = (task.image.width, task.image.height);
        match (task.kind, &sub.clicks, &sub.boxes) {
            (TaskKind::Type1, Some(clicks), None) => {
                let mut out = Vec::with_capacity(clicks.len());
                for c in clicks {
                    match ClickPoint::new(c.x, c.y) {
                        Ok(p) if p.within_image(w, h) => out.push(p),
                        _ => return bad(format!("click ({}, {}) is outside the {w}x{h} image", c.x, c.y)),
                    }
                }
                Ok(Answer::Clicks(out))
            }
            (TaskKind::Type2 | TaskKind::Full, None, Some(boxes)) => {
                let mut out = Vec::with_capacity(boxes.len());
                for b in boxes {
                    match BoundingBox::new(b.x_min, b.y_min, b.x_max, b.y_max) {
                        Ok(bb) if bb.within_image(w, h) => out.push(bb),
                        Ok(_) => return bad(format!("box {b:?} is outside the {w}x{h} image")),
                        Err(e) => return bad(e.to_string()),
                    }
                }
                Ok(Answer::Boxes(out))
            }
            (TaskKind::Type1, _, _) => bad(format!("{} expects clicks only", task.task_id)),
            _ => bad(format!("{} expects boxes only", task.task_id)),
        }
    }

    /// Records one answer. When it completes the phase, hands the batch to
    /// the engine and opens the next phase.
    pub fn submit(&mut self, sub: AnnotationSubmission) -> Result<SubmissionAck, SessionError> {
        let Some(idx) = self.tasks.iter().position(|t| t.task_id == sub.task_id) else {
            if self.consumed.contains(&sub.task_id) {
                return Err(SessionError::Conflict(format!(
                    "task {} belongs to a phase that has already closed",
                    sub.task_id
                )));
            }
            return Err(SessionError::NotFound(format!("no task {}", sub.task_id)));
        };
        let answer = self.validate(&self.tasks[idx], &sub)?;
        let replaced = self.answers.insert(sub.task_id.clone(), answer).is_some();
        self.tasks[idx].state = TaskState::Submitted;
        self.engine
            .record_annotation(&sub.task_id, sub.duration_ms, sub.annotator_id.as_deref());

        let phase_advanced = self.answers.len() == self.tasks.len();
        if phase_advanced {
            self.advance()?;
        }
        Ok(SubmissionAck {
            task_id: sub.task_id,
            replaced,
            phase_advanced,
            phase: self.engine.phase(),
            episode: self.engine.episodes_completed(),
        })
    }

    fn advance(&mut self) -> Result<(), SessionError> {
        let ids: Vec<String> = self.tasks.iter().map(|t| t.task_id.clone()).collect();
        // Kept until the engine accepts the batch, so a failure leaves the
        // phase open with its answers intact.
        let mut answers = self.answers.clone();
        let mut take = |task: &AnnotationTask| answers.remove(&task.task_id).expect("every task answered");
        let result = match self.engine.phase() {
            Phase::Type1 => {
                let labels = self
                    .tasks
                    .iter()
                    .map(|t| match take(t) {
                        Answer::Clicks(clicks) => WeakLabelSet {
                            image_id: t.image.id.clone(),
                            clicks,
                        },
                        Answer::Boxes(_) => unreachable!("validated as clicks"),
                    })
                    .collect();
                self.engine.submit_weak(labels).map(|_| None)
            }
            _ => {
                let boxes: BTreeMap<String, Vec<BoundingBox>> = self
                    .tasks
                    .iter()
                    .map(|t| match take(t) {
                        Answer::Boxes(b) => (t.image.id.clone(), b),
                        Answer::Clicks(_) => unreachable!("validated as boxes"),
                    })
                    .collect();
                self.engine.submit_strong(boxes).map(Some)
            }
        };
        let log = result?;
        self.answers.clear();
        self.consumed.extend(ids);
        if let Some(log) = log {
            if let Some(sink) = &mut self.sink {
                sink.write(&log)?;
            }
            self.logs.push(log);
        }
        self.open_phase()
    }

    /// The run log as newline-delimited JSON.
    pub fn log_text(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serializes");
        out.push('\n');
        for l in &self.logs {
            out.push_str(&serde_json::to_string(l).expect("episode serializes"));
            out.push('\n');
        }
        out
    }
}
