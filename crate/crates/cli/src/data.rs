use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args};
use palps::dataset::{
    compute_stats, downsample, load_manifest, percentile, slice_tiles, tune_rpf_params, write_manifest,
    DatasetManifest, PartialPolicy, Rounding, TuneOptions,
};
use palps::engine::DatasetSource;

use crate::config::read_config_file;
use crate::{runtime, write_atomic, CliError};

#[derive(Debug, Args)]
pub struct SliceArgs {
    /// Input manifest
    #[arg(long = "in", value_name = "FILE")]
    pub input: PathBuf,
    /// Output manifest
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Divide image sizes and coordinates by this factor first
    #[arg(long, value_name = "FACTOR")]
    pub downsample: Option<f64>,
    /// Tile size in pixels, e.g. 500x500
    #[arg(long, value_name = "WxH", value_parser = parse_tile)]
    pub tile: Option<(f64, f64)>,
    /// Handling of objects cut by a tile border: drop_image or drop_object
    #[arg(long, value_name = "POLICY", default_value = "drop_image")]
    pub partial: PartialPolicy,
}

fn parse_tile(s: &str) -> Result<(f64, f64), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WIDTHxHEIGHT, got `{s}`"))?;
    let num = |t: &str| -> Result<f64, String> {
        let v: f64 = t.trim().parse().map_err(|_| format!("`{t}` is not a number"))?;
        if v.is_finite() && v > 0.0 {
            Ok(v)
        } else {
            Err(format!("tile sides must be positive, got `{t}`"))
        }
    };
    Ok((num(w)?, num(h)?))
}

fn read_manifest(path: &Path) -> Result<DatasetManifest, CliError> {
    let file = File::open(path).map_err(|e| runtime(format!("cannot open {}: {e}", path.display())))?;
    load_manifest(BufReader::new(file)).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

pub fn slice(args: SliceArgs) -> Result<(), CliError> {
    if args.downsample.is_none() && args.tile.is_none() {
        return Err(CliError::Usage("nothing to do: pass --downsample and/or --tile".into()));
    }
    let mut m = read_manifest(&args.input)?;
    if let Some(f) = args.downsample {
        m = downsample(&m, f).map_err(runtime)?;
    }
    if let Some((w, h)) = args.tile {
        m = slice_tiles(&m, w, h, args.partial).map_err(runtime)?;
    }
    let mut bytes = Vec::new();
    write_manifest(&m, &mut bytes).map_err(runtime)?;
    write_atomic(&args.out, &bytes).map_err(runtime)?;
    outln!(
        "wrote {} images with {} objects to {}",
        m.images.len(),
        m.total_objects(),
        args.out.display()
    );
    Ok(())
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["input", "config"])))]
pub struct TuneArgs {
    /// Dataset manifest
    #[arg(long = "in", value_name = "FILE")]
    pub input: Option<PathBuf>,
    /// Run configuration whose dataset is tuned (may be synthetic)
    #[arg(long, short = 'c', value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Percentile of per-image minimum center distance used for epsilon
    #[arg(long, value_name = "P", default_value_t = 20.0)]
    pub eps_percentile: f64,
    /// Percentile of box area used for alpha
    #[arg(long, value_name = "P", default_value_t = 90.0)]
    pub alpha_percentile: f64,
    /// `default` (epsilon to 1 significant figure, alpha to 2), `none`, or
    /// `sigfigs:N` for both
    #[arg(long, value_name = "MODE", default_value = "default", value_parser = parse_rounding)]
    pub rounding: RoundingArg,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RoundingArg {
    Default,
    Both(Rounding),
}

fn parse_rounding(s: &str) -> Result<RoundingArg, String> {
    match s {
        "default" => Ok(RoundingArg::Default),
        "none" => Ok(RoundingArg::Both(Rounding::None)),
        _ => {
            let n = s
                .strip_prefix("sigfigs:")
                .and_then(|n| n.parse::<u32>().ok())
                .filter(|n| *n > 0)
                .ok_or_else(|| format!("expected default, none or sigfigs:N, got `{s}`"))?;
            Ok(RoundingArg::Both(Rounding::SigFigs(n)))
        }
    }
}

fn tune_source(args: &TuneArgs) -> Result<DatasetManifest, CliError> {
    if let Some(path) = &args.input {
        return read_manifest(path);
    }
    let path = args.config.as_ref().expect("clap requires a source");
    let mut value = read_config_file(path)?;
    let dataset = value
        .get_mut("dataset")
        .map(serde_json::Value::take)
        .ok_or_else(|| runtime(format!("{} has no dataset", path.display())))?;
    let source: DatasetSource = serde_json::from_value(dataset).map_err(|e| runtime(format!("dataset: {e}")))?;
    let base = std::path::absolute(path).map_err(runtime)?;
    source.load(base.parent()).map_err(runtime)
}

pub fn tune(args: TuneArgs) -> Result<(), CliError> {
    let m = tune_source(&args)?;
    let stats = compute_stats(&m);
    let mut opts = TuneOptions {
        eps_percentile: args.eps_percentile,
        alpha_percentile: args.alpha_percentile,
        ..TuneOptions::default()
    };
    if let RoundingArg::Both(r) = args.rounding {
        opts = opts.with_rounding(r);
    }
    let raw = tune_rpf_params(&stats, &opts.with_rounding(Rounding::None)).map_err(runtime)?;
    let params = tune_rpf_params(&stats, &opts).map_err(runtime)?;

    let mut text = format!(
        "epsilon: {} (raw {:.2}, percentile {} of {} per-image minimum center distances)\n\
         alpha: {} (raw {:.2}, percentile {} of {} box areas)\n\n",
        params.epsilon,
        raw.epsilon,
        args.eps_percentile,
        stats.min_pairwise_center_distances.len(),
        params.alpha,
        raw.alpha,
        args.alpha_percentile,
        stats.box_areas.len()
    );
    text.push_str(&format!(
        "{:>10}  {:>20}  {:>12}\n",
        "percentile", "min_center_distance", "box_area"
    ));
    for p in (0..=100).step_by(10) {
        let p = p as f64;
        let d = percentile(&stats.min_pairwise_center_distances, p).unwrap_or(f64::NAN);
        let a = percentile(&stats.box_areas, p).unwrap_or(f64::NAN);
        text.push_str(&format!("{p:>10}  {d:>20.2}  {a:>12.2}\n"));
    }
    match std::io::stdout().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(runtime(e)),
        _ => Ok(()),
    }
}
