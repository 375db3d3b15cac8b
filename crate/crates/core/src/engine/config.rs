use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::EngineError;
use crate::dataset::{generate_synthetic, load_manifest, DatasetManifest, RpfParams, SyntheticConfig};
use crate::detector::{Detector, ExternalDetector, SyntheticDetector, SyntheticDetectorParams};
use crate::eval::ApVariant;
use crate::oracle::OracleConfig;
use crate::sampling::{QueryStrategy, ScoringConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// A manifest file; relative paths resolve against the config file.
    Manifest {
        path: PathBuf,
    },
    Synthetic {
        #[serde(default)]
        config: SyntheticConfig,
        seed: u64,
    },
    Inline {
        manifest: DatasetManifest,
    },
}

impl DatasetSource {
    pub fn load(&self, base_dir: Option<&Path>) -> Result<DatasetManifest, EngineError> {
        match self {
            DatasetSource::Manifest { path } => {
                let full = match base_dir {
                    Some(dir) if path.is_relative() => dir.join(path),
                    _ => path.clone(),
                };
                let file = File::open(&full)
                    .map_err(|e| EngineError::Config(format!("cannot open manifest {}: {e}", full.display())))?;
                Ok(load_manifest(BufReader::new(file))?)
            }
            DatasetSource::Synthetic { config, seed } => Ok(generate_synthetic(config, *seed)?),
            DatasetSource::Inline { manifest } => {
                manifest.validate()?;
                Ok(manifest.clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DetectorConfig {
    Synthetic {
        #[serde(default)]
        params: SyntheticDetectorParams,
    },
    /// A detector process speaking the JSON-lines protocol on stdio.
    Subprocess {
        command: String,
        #[serde(default)]
        args: Vec<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        hyperparams: Option<serde_json::Value>,
    },
    /// A detector server speaking the JSON-lines protocol over TCP.
    Tcp {
        address: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        hyperparams: Option<serde_json::Value>,
    },
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig::Synthetic {
            params: SyntheticDetectorParams::default(),
        }
    }
}

impl DetectorConfig {
    /// Builds the detector. The synthetic detector draws from `seed`.
    pub fn build(&self, seed: u64) -> Result<Arc<dyn Detector>, EngineError> {
        Ok(match self {
            DetectorConfig::Synthetic { params } => Arc::new(SyntheticDetector::new(params.clone(), seed)?),
            DetectorConfig::Subprocess {
                command,
                args,
                hyperparams,
            } => Arc::new(ExternalDetector::spawn(command, args)?.with_hyperparams(hyperparams.clone())),
            DetectorConfig::Tcp { address, hyperparams } => {
                Arc::new(ExternalDetector::connect(address.as_str())?.with_hyperparams(hyperparams.clone()))
            }
        })
    }
}

/// How many images a one-stage baseline labels per episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineThroughput {
    /// `b_S` images, so baselines and two-stage runs grow the labeled pool
    /// at the same rate.
    #[default]
    StrongOnly,
    /// `b_W + b_S` images, matching the budget charged per episode.
    WeakPlusStrong,
}

fn default_test_fraction() -> f64 {
    0.4
}

fn default_iou() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    pub method: QueryStrategy,
    #[serde(default)]
    pub detector: DetectorConfig,
    #[serde(default)]
    pub oracle: OracleConfig,
    pub rpf: RpfParams,
    pub b_w: usize,
    pub b_s: usize,
    pub initial_labeled: usize,
    /// Query allowance in images; each episode spends `b_w + b_s`.
    pub budget: u64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub episode_cap: Option<u32>,
    /// Share of the dataset held out for evaluation and never queried.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub scoring: ScoringConfig,
    #[serde(default)]
    pub baseline_throughput: BaselineThroughput,
    /// Adds per-episode elapsed time to the run log, which makes logs of
    /// identical runs differ.
    #[serde(default)]
    pub record_wall_clock: bool,
    #[serde(default = "default_iou")]
    pub iou_threshold: f64,
    #[serde(default)]
    pub ap_variant: ApVariant,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: String| Err(EngineError::Config(m));
        if self.b_w == 0 || self.b_s == 0 {
            return bad(format!(
                "b_w and b_s must be positive, got {} and {}",
                self.b_w, self.b_s
            ));
        }
        if self.initial_labeled == 0 {
            return bad("initial_labeled must be positive".into());
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return bad(format!("test_fraction must be in [0,1), got {}", self.test_fraction));
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return bad(format!("iou_threshold must be in (0,1), got {}", self.iou_threshold));
        }
        if !(self.scoring.lambda1.is_finite() && self.scoring.lambda2.is_finite()) {
            return bad("scoring lambdas must be finite".into());
        }
        RpfParams::new(self.rpf.epsilon, self.rpf.alpha)?;
        self.oracle.validate()?;
        if let DetectorConfig::Synthetic { params } = &self.detector {
            params.validate()?;
        }
        Ok(())
    }

    /// Images moved out of the unlabeled pool by one episode's first stage.
    pub fn first_stage_batch(&self) -> usize {
        match (self.method.is_baseline(), self.baseline_throughput) {
            (false, _) => self.b_w,
            (true, BaselineThroughput::StrongOnly) => self.b_s,
            (true, BaselineThroughput::WeakPlusStrong) => self.b_w + self.b_s,
        }
    }

    pub fn budget_per_episode(&self) -> u64 {
        (self.b_w + self.b_s) as u64
    }

    /// Loads the dataset and builds the detector, seeded from the run seed.
    pub fn prepare(&self, base_dir: Option<&Path>) -> Result<(Arc<DatasetManifest>, Arc<dyn Detector>), EngineError> {
        self.validate()?;
        let manifest = Arc::new(self.dataset.load(base_dir)?);
        let detector = self.detector.build(self.seed)?;
        Ok((manifest, detector))
    }
}
