//! Newline-delimited JSON run logs.
//!
//! Line 1 is a [`RunHeader`]; each further line is one [`EpisodeLog`]. Every
//! record carries a SHA-256 checksum chained from the previous record, so an
//! edited or reordered line is detected on replay.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EngineError, RunConfig};
use crate::eval::EvalSnapshot;
use crate::geometry::BoundingBox;
use crate::oracle::CostLedger;
use crate::sampling::WeakLabelSet;

pub const RUN_LOG_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub format_version: u32,
    pub config: RunConfig,
    pub manifest_name: String,
    pub manifest_hash: String,
    pub dataset_images: usize,
    pub test_images: usize,
    pub checksum: String,
}

impl RunHeader {
    fn digest(&self) -> String {
        let mut blank = self.clone();
        blank.checksum.clear();
        let bytes = serde_json::to_vec(&blank).expect("header serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub(crate) fn seal(mut self) -> Self {
        self.checksum = self.digest();
        self
    }

    pub fn verify(&self) -> Result<(), EngineError> {
        if self.format_version != RUN_LOG_FORMAT_VERSION {
            return Err(EngineError::Integrity(format!(
                "unsupported run log format_version {}",
                self.format_version
            )));
        }
        if self.digest() != self.checksum {
            return Err(EngineError::Integrity("run log header checksum mismatch".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSizes {
    pub labeled: usize,
    pub weak: usize,
    pub unlabeled: usize,
}

/// Everything one episode changed. Episode 0 records the initial labeled
/// pool and the evaluation of the first model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: u32,
    pub queried_weak: Vec<String>,
    pub queried_strong: Vec<String>,
    /// Scores of the images chosen by each stage, keyed by image id.
    pub weak_uncertainty: BTreeMap<String, f64>,
    pub strong_uncertainty: BTreeMap<String, f64>,
    pub weak_labels: Vec<WeakLabelSet>,
    pub strong_labels: BTreeMap<String, Vec<BoundingBox>>,
    pub ledger: CostLedger,
    pub eval: Option<EvalSnapshot>,
    pub model_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skill: Option<f64>,
    pub budget_remaining: u64,
    pub pools: PoolSizes,
    /// Annotator-reported time per task, human runs only; never costed.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub measured_durations_ms: BTreeMap<String, u64>,
    /// Who answered each task, human runs only.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub annotators: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_ms: Option<u64>,
    pub checksum: String,
}

impl EpisodeLog {
    fn digest(&self, previous: &str) -> String {
        let mut blank = self.clone();
        blank.checksum.clear();
        let mut hasher = Sha256::new();
        hasher.update(previous.as_bytes());
        hasher.update(b"\n");
        hasher.update(serde_json::to_vec(&blank).expect("episode serializes"));
        hex::encode(hasher.finalize())
    }

    pub(crate) fn seal(&mut self, previous: &str) {
        self.checksum = self.digest(previous);
    }

    /// Checks this record's checksum against its predecessor's.
    pub fn verify(&self, previous: &str) -> Result<(), EngineError> {
        if self.digest(previous) != self.checksum {
            return Err(EngineError::Integrity(format!(
                "checksum mismatch in episode {}",
                self.episode
            )));
        }
        Ok(())
    }
}

/// Appends records to a run log, flushing after each line.
pub struct RunLogWriter<W: Write> {
    sink: W,
}

impl<W: Write> RunLogWriter<W> {
    pub fn new(mut sink: W, header: &RunHeader) -> Result<Self, EngineError> {
        write_line(&mut sink, header)?;
        Ok(Self { sink })
    }

    /// Continues an existing log without rewriting its header.
    pub fn append(sink: W) -> Self {
        Self { sink }
    }

    pub fn write(&mut self, log: &EpisodeLog) -> Result<(), EngineError> {
        write_line(&mut self.sink, log)
    }

    pub fn into_inner(self) -> W {
        self.sink
    }
}

fn write_line<W: Write, T: Serialize>(sink: &mut W, value: &T) -> Result<(), EngineError> {
    let mut line = serde_json::to_vec(value)?;
    line.push(b'\n');
    sink.write_all(&line)?;
    sink.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub header: RunHeader,
    pub episodes: Vec<EpisodeLog>,
    /// The final line was incomplete (an interrupted write) and was ignored.
    pub truncated_tail: bool,
}

/// Reads a run log. An unparseable final line without a trailing newline
/// is treated as an interrupted write and dropped; anything else malformed
/// is an error.
pub fn read_run_log<R: BufRead>(mut source: R) -> Result<RunLog, EngineError> {
    let mut lines = Vec::new();
    loop {
        let mut buf = String::new();
        if source.read_line(&mut buf)? == 0 {
            break;
        }
        lines.push(buf);
    }
    let mut truncated_tail = false;
    if let Some(last) = lines.last() {
        if !last.ends_with('\n') && serde_json::from_str::<serde_json::Value>(last).is_err() {
            lines.pop();
            truncated_tail = true;
        }
    }
    let mut iter = lines.iter().filter(|l| !l.trim().is_empty());
    let header_line = iter
        .next()
        .ok_or_else(|| EngineError::Integrity("run log is empty".into()))?;
    let header: RunHeader =
        serde_json::from_str(header_line).map_err(|e| EngineError::Integrity(format!("bad run log header: {e}")))?;
    let episodes = iter
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| EngineError::Integrity(format!("bad episode record {}: {e}", i + 1)))
        })
        .collect::<Result<Vec<EpisodeLog>, _>>()?;
    Ok(RunLog {
        header,
        episodes,
        truncated_tail,
    })
}
