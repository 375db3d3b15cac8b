use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use palps::engine::{read_run_log, Engine, EpisodeLog, RunConfig, RunLogWriter};
use palps::eval::{emit_curves, hours_to_target, write_curves_csv, CurvePoint};
use palps::oracle::{OracleMode, SimulatedOracle};
use palps::sampling::QueryStrategy;
use palps_service::{AppState, ServiceConfig};
use rayon::prelude::*;

use crate::config::{resolve_run_config, RunFlags};
use crate::{runtime, write_atomic, CliError};

pub const DEFAULT_BIND: &str = "127.0.0.1:8080";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OracleArg {
    /// Answers from ground truth
    Simulated,
    /// Answers from a person through the HTTP service
    Human,
}

impl From<OracleArg> for OracleMode {
    fn from(a: OracleArg) -> Self {
        match a {
            OracleArg::Simulated => OracleMode::Simulated,
            OracleArg::Human => OracleMode::Human,
        }
    }
}

pub(crate) fn parse_strategy(s: &str) -> Result<QueryStrategy, String> {
    s.parse().map_err(|e: palps::sampling::SamplingError| e.to_string())
}

#[derive(Debug, Clone, Default, Args)]
pub struct HttpFlags {
    /// Listen address [default: 127.0.0.1:8080]
    #[arg(long, value_name = "ADDR")]
    pub bind: Option<String>,
    /// Directory holding the annotation client, served at /
    #[arg(long, value_name = "DIR")]
    pub ui_dir: Option<PathBuf>,
    /// Allowed CORS origin; repeat for several. Any origin when omitted
    #[arg(long = "cors-origin", value_name = "ORIGIN")]
    pub cors_origins: Vec<String>,
}

impl HttpFlags {
    fn is_set(&self) -> bool {
        self.bind.is_some() || self.ui_dir.is_some() || !self.cors_origins.is_empty()
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub flags: RunFlags,
    /// Query strategy: rand, lc, mar, ent, or a two-stage pair such as lc_mv
    #[arg(long, short = 'm', value_name = "METHOD", value_parser = parse_strategy)]
    pub method: Option<QueryStrategy>,
    /// Seed for every random stream of the run; required here or in the config
    #[arg(long, short = 's', value_name = "N")]
    pub seed: Option<u64>,
    /// Annotation source [default: simulated]
    #[arg(long, value_enum)]
    pub oracle: Option<OracleArg>,
    /// Directory for the run log and curve CSV
    #[arg(long, short = 'o', value_name = "DIR", default_value = "runs")]
    pub out: PathBuf,
    /// Continue the run from its log in the output directory
    #[arg(long)]
    pub resume: bool,
    #[command(flatten)]
    pub http: HttpFlags,
}

/// A finished simulated run.
#[derive(Debug)]
pub struct RunOutcome {
    pub logs: Vec<EpisodeLog>,
    pub stop_reason: &'static str,
    pub log_path: PathBuf,
    pub curve_path: PathBuf,
}

fn run_stem(config: &RunConfig) -> String {
    format!("{}-seed{}", config.method, config.seed)
}

fn write_curves(path: &Path, points: &[CurvePoint]) -> Result<(), CliError> {
    let mut bytes = Vec::new();
    write_curves_csv(points, &mut bytes).map_err(runtime)?;
    write_atomic(path, &bytes).map_err(runtime)
}

/// Runs a simulated-oracle experiment. The log is streamed to
/// `<stem>.jsonl.partial`, flushed per episode, and renamed to
/// `<stem>.jsonl` once the run ends; a failed run leaves the partial log,
/// which `resume` continues from.
pub fn execute_simulated(
    config: RunConfig,
    base_dir: Option<&Path>,
    out: &Path,
    resume: bool,
) -> Result<RunOutcome, CliError> {
    let stem = run_stem(&config);
    let log_path = out.join(format!("{stem}.jsonl"));
    let partial = out.join(format!("{stem}.jsonl.partial"));
    let curve_path = out.join(format!("{stem}.csv"));
    let method = config.method.to_string();
    let seed = config.seed;

    let (manifest, detector) = config.prepare(base_dir).map_err(runtime)?;
    let oracle = SimulatedOracle::new(config.oracle).map_err(runtime)?;
    fs::create_dir_all(out).map_err(|e| runtime(format!("cannot create {}: {e}", out.display())))?;

    let previous = if resume {
        [&partial, &log_path].into_iter().find(|p| p.exists())
    } else {
        None
    };
    let (mut engine, mut logs, first) = match previous {
        Some(path) => {
            let file = File::open(path).map_err(runtime)?;
            let log = read_run_log(BufReader::new(file)).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
            if log.header.config != config {
                return Err(CliError::Usage(format!(
                    "the configuration differs from the one logged in {}",
                    path.display()
                )));
            }
            let (engine, first) = Engine::resume(&log, manifest, detector).map_err(runtime)?;
            log::info!("resuming {stem} after {} logged records", log.episodes.len());
            (engine, log.episodes, first)
        }
        None => {
            let (engine, first) = Engine::new(config, manifest, detector).map_err(runtime)?;
            (engine, Vec::new(), Some(first))
        }
    };
    logs.extend(first);

    let file = File::create(&partial).map_err(|e| runtime(format!("cannot create {}: {e}", partial.display())))?;
    let mut writer = RunLogWriter::new(file, engine.header()).map_err(runtime)?;
    for l in &logs {
        writer.write(l).map_err(runtime)?;
    }
    let result = engine.run(&oracle, |ep| {
        log::info!("{stem}: episode {} done", ep.episode);
        writer.write(ep)
    });
    let file = writer.into_inner();
    file.sync_all().map_err(runtime)?;
    drop(file);
    let fresh = result.map_err(|e| runtime(format!("{e} (completed episodes are in {})", partial.display())))?;
    logs.extend(fresh);
    fs::rename(&partial, &log_path).map_err(runtime)?;

    write_curves(&curve_path, &emit_curves(&method, seed, &logs))?;
    Ok(RunOutcome {
        logs,
        stop_reason: engine.stop_reason().unwrap_or("stopped"),
        log_path,
        curve_path,
    })
}

pub fn run(args: RunArgs) -> Result<(), CliError> {
    let (config, base_dir) = resolve_run_config(&args.flags, args.method, args.seed, args.oracle.map(Into::into))?;
    if config.oracle.mode == OracleMode::Human {
        if args.resume {
            return Err(CliError::Usage(
                "--resume applies to simulated runs; human runs resume with `palps serve --log-dir`".into(),
            ));
        }
        return run_human(config, base_dir, &args.out, &args.http);
    }
    if args.http.is_set() {
        return Err(CliError::Usage(
            "--bind, --ui-dir and --cors-origin need --oracle human".into(),
        ));
    }
    let label = format!("{} seed {}", config.method, config.seed);
    let outcome = execute_simulated(config, base_dir.as_deref(), &args.out, args.resume)?;
    let last = outcome.logs.last().expect("a run logs its initial state");
    outln!(
        "{label}: {} episodes, {} images labeled, {:.3} annotation hours, map_at_50 {} ({})",
        last.episode,
        last.pools.labeled,
        last.ledger.seconds_total.hours(),
        last.eval
            .as_ref()
            .map_or("n/a".into(), |e| format!("{:.4}", e.map_at_50)),
        outcome.stop_reason
    );
    outln!("log: {}", outcome.log_path.display());
    outln!("curve: {}", outcome.curve_path.display());
    Ok(())
}

fn tokio_runtime() -> Result<tokio::runtime::Runtime, CliError> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(runtime)
}

async fn bind(http: &HttpFlags) -> Result<tokio::net::TcpListener, CliError> {
    let addr = http.bind.as_deref().unwrap_or(DEFAULT_BIND);
    tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| runtime(format!("cannot listen on {addr}: {e}")))
}

fn run_human(config: RunConfig, base_dir: Option<PathBuf>, out: &Path, http: &HttpFlags) -> Result<(), CliError> {
    let state = AppState::new(ServiceConfig {
        log_dir: Some(out.to_path_buf()),
        base_dir,
        cors_origins: http.cors_origins.clone(),
        ui_dir: http.ui_dir.clone(),
    })
    .map_err(runtime)?;
    let run_id = state.create_run(config).map_err(runtime)?;
    let rt = tokio_runtime()?;
    rt.block_on(async {
        let listener = bind(http).await?;
        let addr = listener.local_addr().map_err(runtime)?;
        outln!("run {run_id} is waiting for annotations at http://{addr}/");
        let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
        let server = tokio::spawn(palps_service::serve(state.clone(), listener, async {
            let _ = stopped.await;
        }));
        let outcome = tokio::select! {
            r = state.wait_until_done(&run_id) => r.map(|_| ()).map_err(runtime),
            _ = tokio::signal::ctrl_c() => Err(runtime(format!(
                "interrupted; `palps serve --log-dir {}` picks {run_id} up again", out.display()
            ))),
        };
        let _ = stop.send(());
        let _ = server.await;
        outcome
    })?;

    let log_path = out.join(format!("{run_id}.jsonl"));
    let log = read_run_log(BufReader::new(File::open(&log_path).map_err(runtime)?)).map_err(runtime)?;
    let curve_path = out.join(format!("{run_id}.csv"));
    let method = log.header.config.method.to_string();
    write_curves(
        &curve_path,
        &emit_curves(&method, log.header.config.seed, &log.episodes),
    )?;
    outln!("log: {}", log_path.display());
    outln!("curve: {}", curve_path.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub flags: RunFlags,
    /// Comma-separated strategies [default: rand,lc,mar,ent,lc_mv,mar_me,ent_mev]
    #[arg(long, value_name = "LIST", value_delimiter = ',', value_parser = parse_strategy)]
    pub methods: Option<Vec<QueryStrategy>>,
    /// Comma-separated seeds shared by every method
    #[arg(long, value_name = "LIST", value_delimiter = ',', required = true)]
    pub seeds: Vec<u64>,
    /// Report the annotation hours each method needs to reach this AP
    #[arg(long, value_name = "AP")]
    pub target_map: Option<f64>,
    /// Directory for run logs, per-run curves and the merged curves.csv
    #[arg(long, short = 'o', value_name = "DIR", default_value = "runs")]
    pub out: PathBuf,
    /// Runs executed in parallel [default: available cores]
    #[arg(long, short = 'j', value_name = "N")]
    pub jobs: Option<usize>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

pub fn compare(args: CompareArgs) -> Result<(), CliError> {
    let methods = args.methods.clone().unwrap_or_else(QueryStrategy::comparison_set);
    if methods.is_empty() || args.seeds.is_empty() {
        return Err(CliError::Usage("compare needs at least one method and one seed".into()));
    }
    if let Some(t) = args.target_map {
        if !(0.0..=1.0).contains(&t) {
            return Err(CliError::Usage(format!("--target-map must lie in [0, 1], got {t}")));
        }
    }
    if args.jobs == Some(0) {
        return Err(CliError::Usage("--jobs must be positive".into()));
    }
    let mut jobs = Vec::new();
    for m in &methods {
        for &s in &args.seeds {
            let (config, base) = resolve_run_config(&args.flags, Some(*m), Some(s), None)?;
            if config.oracle.mode == OracleMode::Human {
                return Err(CliError::Usage("compare runs simulated oracles only".into()));
            }
            jobs.push((config, base));
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs.unwrap_or(0))
        .build()
        .map_err(runtime)?;
    let results: Vec<Result<RunOutcome, CliError>> = pool.install(|| {
        jobs.into_par_iter()
            .map(|(config, base)| execute_simulated(config, base.as_deref(), &args.out, false))
            .collect()
    });

    let mut failed = 0;
    let mut curves: Vec<CurvePoint> = Vec::new();
    let mut per_run: Vec<(String, Vec<CurvePoint>)> = Vec::new();
    let labels = methods.iter().flat_map(|m| args.seeds.iter().map(move |s| (m, s)));
    for ((m, s), r) in labels.zip(results) {
        match r {
            Ok(outcome) => {
                let points = emit_curves(&m.to_string(), *s, &outcome.logs);
                curves.extend(points.iter().cloned());
                per_run.push((m.to_string(), points));
            }
            Err(e) => {
                failed += 1;
                eprintln!("error: {m} seed {s}: {e}");
            }
        }
    }
    let merged = args.out.join("curves.csv");
    write_curves(&merged, &curves)?;

    let target_col = args.target_map.map(|t| format!("hours_to_{t}"));
    let mut header = format!(
        "{:<10} {:>5} {:>9} {:>9} {:>9}",
        "method", "runs", "labeled", "hours", "map_at_50"
    );
    if let Some(c) = &target_col {
        header.push_str(&format!(" {c:>14}"));
    }
    outln!("{header}");
    for m in &methods {
        let name = m.to_string();
        let finals: Vec<&CurvePoint> = per_run
            .iter()
            .filter(|(n, _)| *n == name)
            .filter_map(|(_, p)| p.last())
            .collect();
        if finals.is_empty() {
            outln!("{name:<10} {:>5} {:>9} {:>9} {:>9}", 0, "-", "-", "-");
            continue;
        }
        let avg = |f: fn(&CurvePoint) -> f64| mean(&finals.iter().map(|p| f(p)).collect::<Vec<_>>()).unwrap_or(0.0);
        let mut row = format!(
            "{name:<10} {:>5} {:>9.1} {:>9.3} {:>9.4}",
            finals.len(),
            avg(|p| p.images_labeled as f64),
            avg(|p| p.annotation_hours),
            avg(|p| p.map_at_50)
        );
        if let Some(t) = args.target_map {
            let hits: Vec<f64> = per_run
                .iter()
                .filter(|(n, _)| *n == name)
                .filter_map(|(_, p)| hours_to_target(p, t))
                .collect();
            let cell = match mean(&hits) {
                Some(h) if hits.len() == finals.len() => format!("{h:.3}"),
                Some(h) => format!("{h:.3} ({}/{})", hits.len(), finals.len()),
                None => "-".into(),
            };
            row.push_str(&format!(" {cell:>14}"));
        }
        outln!("{row}");
    }
    outln!("curves: {}", merged.display());
    if failed > 0 {
        return Err(runtime(format!(
            "{failed} of {} runs failed",
            methods.len() * args.seeds.len()
        )));
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Directory of run logs; runs found here are resumed
    #[arg(long, value_name = "DIR")]
    pub log_dir: PathBuf,
    /// Base directory for relative manifest paths in submitted configs
    #[arg(long, value_name = "DIR")]
    pub base_dir: Option<PathBuf>,
    #[command(flatten)]
    pub http: HttpFlags,
}

pub fn serve(args: ServeArgs) -> Result<(), CliError> {
    let state = AppState::new(ServiceConfig {
        log_dir: Some(args.log_dir.clone()),
        base_dir: args.base_dir.clone(),
        cors_origins: args.http.cors_origins.clone(),
        ui_dir: args.http.ui_dir.clone(),
    })
    .map_err(runtime)?;
    let rt = tokio_runtime()?;
    rt.block_on(async {
        let listener = bind(&args.http).await?;
        let addr = listener.local_addr().map_err(runtime)?;
        outln!("serving {} runs at http://{addr}/", state.run_ids().len());
        palps_service::serve(state, listener, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(runtime)
    })
}
