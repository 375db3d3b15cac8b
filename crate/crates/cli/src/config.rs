//! Run configuration layering: command-line flags over the config file over
//! built-in defaults.

use std::path::{Path, PathBuf};

use clap::Args;
use palps::engine::RunConfig;
use palps::oracle::OracleMode;
use palps::sampling::QueryStrategy;
use serde_json::{json, Map, Value};

use crate::{runtime, CliError};

/// Flags shared by every command that builds a run configuration.
#[derive(Debug, Clone, Default, Args)]
pub struct RunFlags {
    /// Run configuration file (TOML, or JSON with a .json extension)
    #[arg(long, short = 'c', value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Dataset manifest, replacing the configured dataset
    #[arg(long, value_name = "FILE")]
    pub dataset: Option<PathBuf>,
    /// Images strong-labeled before the first episode [default: 50]
    #[arg(long, value_name = "N")]
    pub initial_labeled: Option<usize>,
    /// Images queried for clicks per episode [default: 50]
    #[arg(long = "b-w", value_name = "N")]
    pub b_w: Option<usize>,
    /// Images queried for boxes per episode [default: 25]
    #[arg(long = "b-s", value_name = "N")]
    pub b_s: Option<usize>,
    /// Query budget in images
    #[arg(long, value_name = "N")]
    pub budget: Option<u64>,
    /// Stop after this many episodes
    #[arg(long, value_name = "N")]
    pub episode_cap: Option<u32>,
    /// Share of the dataset held out for evaluation [default: 0.4]
    #[arg(long, value_name = "F")]
    pub test_fraction: Option<f64>,
    /// RPF search radius in pixels [default: 20]
    #[arg(long, value_name = "PX")]
    pub epsilon: Option<f64>,
    /// RPF maximum proposal area in square pixels [default: 20000]
    #[arg(long, value_name = "PX2")]
    pub alpha: Option<f64>,
}

fn defaults() -> Value {
    json!({
        "b_w": 50,
        "b_s": 25,
        "initial_labeled": 50,
        "rpf": {"epsilon": 20.0, "alpha": 20000.0},
    })
}

/// Recursively overlays `top` onto `base`; tables merge, everything else
/// replaces.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

pub fn read_config_file(path: &Path) -> Result<Value, CliError> {
    let text =
        std::fs::read_to_string(path).map_err(|e| runtime(format!("cannot read config {}: {e}", path.display())))?;
    let parsed = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    } else {
        toml::from_str(&text).map_err(|e| e.to_string())
    };
    let value: Value = parsed.map_err(|e| runtime(format!("cannot parse config {}: {e}", path.display())))?;
    if !value.is_object() {
        return Err(runtime(format!("config {} is not a table", path.display())));
    }
    Ok(value)
}

fn absolute(path: &Path) -> Result<PathBuf, CliError> {
    std::path::absolute(path).map_err(|e| runtime(format!("cannot resolve {}: {e}", path.display())))
}

/// Builds a run configuration. Returns it with the directory that relative
/// manifest paths in it resolve against.
pub fn resolve_run_config(
    flags: &RunFlags,
    method: Option<QueryStrategy>,
    seed: Option<u64>,
    oracle: Option<OracleMode>,
) -> Result<(RunConfig, Option<PathBuf>), CliError> {
    let mut value = defaults();
    let mut base_dir = None;
    if let Some(path) = &flags.config {
        merge(&mut value, read_config_file(path)?);
        base_dir = Some(absolute(path)?.parent().map(Path::to_path_buf).unwrap_or_default());
    }

    let mut top = Map::new();
    if let Some(path) = &flags.dataset {
        top.insert("dataset".into(), json!({"kind": "manifest", "path": absolute(path)?}));
    }
    let mut put = |key: &str, v: Option<Value>| {
        if let Some(v) = v {
            top.insert(key.into(), v);
        }
    };
    put("method", method.map(|m| json!(m)));
    put("seed", seed.map(|s| json!(s)));
    put("initial_labeled", flags.initial_labeled.map(|v| json!(v)));
    put("b_w", flags.b_w.map(|v| json!(v)));
    put("b_s", flags.b_s.map(|v| json!(v)));
    put("budget", flags.budget.map(|v| json!(v)));
    put("episode_cap", flags.episode_cap.map(|v| json!(v)));
    put("test_fraction", flags.test_fraction.map(|v| json!(v)));
    put("oracle", oracle.map(|m| json!({ "mode": m })));
    let mut rpf = Map::new();
    if let Some(e) = flags.epsilon {
        rpf.insert("epsilon".into(), json!(e));
    }
    if let Some(a) = flags.alpha {
        rpf.insert("alpha".into(), json!(a));
    }
    if !rpf.is_empty() {
        top.insert("rpf".into(), Value::Object(rpf));
    }
    merge(&mut value, Value::Object(top));

    for (key, hint) in [
        ("seed", "--seed"),
        ("method", "--method"),
        ("dataset", "--dataset"),
        ("budget", "--budget"),
    ] {
        if value.get(key).is_none() {
            return Err(CliError::Usage(format!(
                "no {key} given: pass {hint} or set `{key}` in the config file"
            )));
        }
    }
    let config: RunConfig =
        serde_json::from_value(value).map_err(|e| runtime(format!("invalid run configuration: {e}")))?;
    config.validate().map_err(runtime)?;
    Ok((config, base_dir))
}

#[cfg(test)]
mod tests {
    use super::*;
    use palps::engine::DatasetSource;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    const FILE: &str = r#"
method = "lc_mv"
seed = 3
budget = 150
b_w = 30

[dataset]
kind = "manifest"
path = "data/m.json"

[rpf]
epsilon = 80.0
"#;

    #[test]
    fn flags_override_file_override_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(dir.path(), "run.toml", FILE);
        let flags = RunFlags {
            config: Some(path),
            b_s: Some(10),
            alpha: Some(1400.0),
            ..RunFlags::default()
        };
        let (cfg, base) = resolve_run_config(&flags, Some("ent_mev".parse().unwrap()), None, None).unwrap();
        assert_eq!(cfg.method.to_string(), "ent_mev");
        assert_eq!(cfg.seed, 3);
        assert_eq!((cfg.b_w, cfg.b_s, cfg.initial_labeled), (30, 10, 50));
        assert_eq!((cfg.rpf.epsilon, cfg.rpf.alpha), (80.0, 1400.0));
        assert_eq!(base.unwrap(), std::path::absolute(dir.path()).unwrap());
        assert_eq!(
            cfg.dataset,
            DatasetSource::Manifest {
                path: "data/m.json".into()
            }
        );
    }

    #[test]
    fn json_files_and_dataset_flag() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(
            dir.path(),
            "run.json",
            r#"{"method": "rand", "seed": 1, "budget": 10, "oracle": {"click_jitter_frac": 0.1}}"#,
        );
        let flags = RunFlags {
            config: Some(path),
            dataset: Some("m.json".into()),
            ..RunFlags::default()
        };
        let (cfg, _) = resolve_run_config(&flags, None, Some(9), Some(OracleMode::Human)).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.oracle.mode, OracleMode::Human);
        assert_eq!(cfg.oracle.click_jitter_frac, 0.1);
        match cfg.dataset {
            DatasetSource::Manifest { path } => assert!(path.is_absolute() && path.ends_with("m.json")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_seed_is_a_usage_error() {
        let flags = RunFlags {
            dataset: Some("m.json".into()),
            budget: Some(10),
            ..RunFlags::default()
        };
        let err = resolve_run_config(&flags, Some("rand".parse().unwrap()), None, None).unwrap_err();
        assert!(matches!(&err, CliError::Usage(m) if m.contains("--seed")), "{err}");
    }

    #[test]
    fn bad_files_are_runtime_errors() {
        let dir = tempfile::tempdir().unwrap();
        let unknown = write(
            dir.path(),
            "a.toml",
            "seed = 1\nmethod = \"rand\"\nbudget = 1\nbogus = 2\n[dataset]\nkind = \"synthetic\"\nseed = 1\n",
        );
        let broken = write(dir.path(), "b.toml", "seed = = 1");
        for path in [unknown, broken, dir.path().join("missing.toml")] {
            let flags = RunFlags {
                config: Some(path),
                ..RunFlags::default()
            };
            let err = resolve_run_config(&flags, None, None, None).unwrap_err();
            assert_eq!(err.exit_code(), 1, "{err}");
        }
    }
}
