use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::PathBuf;

use clap::{ArgGroup, Args, ValueEnum};
use palps::dataset::{load_manifest, ImageRecord};
use palps::detector::{
    Detection, Detector, DetectorError, DetectorOutput, ExternalDetector, LabeledImage, ModelState, SyntheticDetector,
};
use palps::engine::Engine;
use palps::eval::{density_report, evaluate, ApVariant};
use palps::oracle::{annotate_type1, OracleMode};
use palps::sampling::{score_image, Method};

use crate::config::{resolve_run_config, RunFlags};
use crate::{runtime, write_atomic, CliError};

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub flags: RunFlags,
    /// Seed; required here or in the config
    #[arg(long, short = 's', value_name = "N")]
    pub seed: Option<u64>,
    /// Comma-separated metrics [default: mv,me,mev,lc,mar,ent,rand]
    #[arg(long, value_name = "LIST", value_delimiter = ',', value_parser = parse_metric)]
    pub metrics: Option<Vec<Method>>,
    /// Write the CSV here instead of standard output
    #[arg(long, short = 'o', value_name = "FILE")]
    pub out: Option<PathBuf>,
}

fn parse_metric(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: palps::sampling::SamplingError| e.to_string())
}

/// Scores every unlabeled image with the model trained on the initial pool.
/// Point-supervised metrics use simulated clicks.
pub fn score(args: ScoreArgs) -> Result<(), CliError> {
    let metrics = args.metrics.clone().unwrap_or_else(|| Method::ALL.to_vec());
    // No episode runs here, so the method and budget are placeholders when
    // the config leaves them out.
    let mut flags = args.flags.clone();
    flags.budget.get_or_insert(1);
    let (mut config, base) = resolve_run_config(&flags, Some("rand".parse().expect("valid")), args.seed, None)?;
    config.oracle.mode = OracleMode::Simulated;
    let clicks_cfg = config.oracle;
    let (rpf, scoring) = (config.rpf, config.scoring);
    let (manifest, detector) = config.prepare(base.as_deref()).map_err(runtime)?;
    let (engine, _) = Engine::new(config, manifest, detector.clone()).map_err(runtime)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["image_id", "method", "value"]).map_err(runtime)?;
    for id in &engine.pool().unlabeled {
        let image = engine.image(id).expect("pool ids are in the manifest");
        let out = detector.detect(engine.model(), image).map_err(runtime)?;
        let weak = if metrics.iter().any(|m| m.is_point_supervised()) {
            Some(annotate_type1(image, &clicks_cfg).map_err(runtime)?)
        } else {
            None
        };
        for &m in &metrics {
            let s = score_image(m, &out, weak.as_ref(), &rpf, &scoring).map_err(runtime)?;
            w.write_record([id.as_str(), m.as_str(), &s.value.to_string()])
                .map_err(runtime)?;
        }
    }
    let bytes = w.into_inner().map_err(runtime)?;
    match &args.out {
        Some(path) => write_atomic(path, &bytes).map_err(runtime),
        None => match std::io::stdout().write_all(&bytes) {
            Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(runtime(e)),
            _ => Ok(()),
        },
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ApVariantArg {
    AllPoint,
    ElevenPoint,
}

#[derive(Debug, Args)]
#[command(group(
    ArgGroup::new("source")
        .required(true)
        .args(["detections", "detector_cmd", "detector_addr", "synthetic_skill"])
))]
pub struct EvalArgs {
    /// Manifest with the ground-truth boxes to evaluate against
    #[arg(long, value_name = "FILE")]
    pub manifest: PathBuf,
    /// Stored detections: a JSON object mapping image id to a list of
    /// {"box": {...}, "score": s}
    #[arg(long, value_name = "FILE")]
    pub detections: Option<PathBuf>,
    /// Detector program speaking the JSON-lines protocol on stdio
    #[arg(long, value_name = "PROGRAM")]
    pub detector_cmd: Option<String>,
    /// Argument for --detector-cmd; repeat for several
    #[arg(
        long = "detector-arg",
        value_name = "ARG",
        requires = "detector_cmd",
        allow_hyphen_values = true
    )]
    pub detector_args: Vec<String>,
    /// Detector server speaking the JSON-lines protocol over TCP
    #[arg(long, value_name = "ADDR")]
    pub detector_addr: Option<String>,
    /// Model id the external detector evaluates with
    #[arg(long, value_name = "ID", default_value = "latest")]
    pub model_id: String,
    /// Evaluate the synthetic detector at this skill in [0, 1]
    #[arg(long, value_name = "SKILL")]
    pub synthetic_skill: Option<f64>,
    /// Seed of the synthetic detector
    #[arg(long, value_name = "N", default_value_t = 0)]
    pub seed: u64,
    /// A detection matches a box when IoU exceeds this
    #[arg(long, value_name = "T", default_value_t = 0.5)]
    pub iou: f64,
    /// Precision interpolation
    #[arg(long, value_enum, default_value = "all-point")]
    pub ap_variant: ApVariantArg,
    /// Write per-image predicted and actual counts here, followed by r and RMSE
    #[arg(long, value_name = "FILE")]
    pub density_out: Option<PathBuf>,
}

/// Replays detections read from a file.
struct StoredDetections(BTreeMap<String, Vec<Detection>>);

impl Detector for StoredDetections {
    fn train(&self, _: &[LabeledImage<'_>], _: u32) -> Result<ModelState, DetectorError> {
        Err(DetectorError::Protocol("stored detections cannot be retrained".into()))
    }

    fn detect(&self, _: &ModelState, image: &ImageRecord) -> Result<DetectorOutput, DetectorError> {
        Ok(DetectorOutput {
            image_id: image.id.clone(),
            proposals: Vec::new(),
            detections: self.0.get(&image.id).cloned().unwrap_or_default(),
        })
    }
}

fn external_model(id: &str) -> ModelState {
    ModelState {
        model_id: id.to_string(),
        round: 0,
        trained_on: 0,
        skill: None,
    }
}

pub fn eval(args: EvalArgs) -> Result<(), CliError> {
    if !(args.iou > 0.0 && args.iou < 1.0) {
        return Err(CliError::Usage(format!("--iou must lie in (0, 1), got {}", args.iou)));
    }
    let file =
        File::open(&args.manifest).map_err(|e| runtime(format!("cannot open {}: {e}", args.manifest.display())))?;
    let manifest = load_manifest(BufReader::new(file)).map_err(runtime)?;

    let (detector, model): (Box<dyn Detector>, ModelState) = if let Some(path) = &args.detections {
        let file = File::open(path).map_err(|e| runtime(format!("cannot open {}: {e}", path.display())))?;
        let stored: BTreeMap<String, Vec<Detection>> =
            serde_json::from_reader(BufReader::new(file)).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
        if let Some(unknown) = stored.keys().find(|id| manifest.get(id).is_none()) {
            return Err(runtime(format!("detections for unknown image {unknown}")));
        }
        (Box::new(StoredDetections(stored)), external_model("stored"))
    } else if let Some(cmd) = &args.detector_cmd {
        let d = ExternalDetector::spawn(cmd, &args.detector_args).map_err(runtime)?;
        (Box::new(d), external_model(&args.model_id))
    } else if let Some(addr) = &args.detector_addr {
        let d = ExternalDetector::connect(addr.as_str()).map_err(runtime)?;
        (Box::new(d), external_model(&args.model_id))
    } else {
        let skill = args.synthetic_skill.expect("clap requires a source");
        if !(0.0..=1.0).contains(&skill) {
            return Err(CliError::Usage(format!(
                "--synthetic-skill must lie in [0, 1], got {skill}"
            )));
        }
        let d = SyntheticDetector::new(Default::default(), args.seed).map_err(runtime)?;
        (Box::new(d), SyntheticDetector::model_with_skill(skill, 0))
    };

    let variant = match args.ap_variant {
        ApVariantArg::AllPoint => ApVariant::AllPoint,
        ApVariantArg::ElevenPoint => ApVariant::ElevenPoint,
    };
    let images: Vec<&ImageRecord> = manifest.images.iter().collect();
    let snap = evaluate(detector.as_ref(), &model, &images, args.iou, variant).map_err(runtime)?;
    outln!("map_at_50: {:.6}", snap.map_at_50);
    outln!("true_positives: {}", snap.true_positives);
    outln!("false_positives: {}", snap.false_positives);
    outln!("ground_truth: {}", snap.total_gt);
    outln!("images: {}", snap.test_images);

    if let Some(path) = &args.density_out {
        let report = density_report(detector.as_ref(), &model, &images).map_err(runtime)?;
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &report.rows {
            w.serialize(row).map_err(runtime)?;
        }
        let mut bytes = w.into_inner().map_err(runtime)?;
        let r = report.r.map_or("undefined".to_string(), |r| format!("{r:.6}"));
        writeln!(bytes, "# r={r}").map_err(runtime)?;
        writeln!(bytes, "# rmse={:.6}", report.rmse).map_err(runtime)?;
        write_atomic(path, &bytes).map_err(runtime)?;
        outln!("density_r: {r}");
        outln!("density_rmse: {:.6}", report.rmse);
    }
    Ok(())
}
