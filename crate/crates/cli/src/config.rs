//! `key = value` run configuration with a fixed key registry.
//!
//! Values are resolved in order: command-line flags, then the config file,
//! then `EPIHYB_SEED` (for `seed` only), then the built-in defaults.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use epihybrid::data::{DatasetName, Granularity, SplitSpec};
use epihybrid::harness::experiments::{Protocol, SweepParam};
use epihybrid::harness::{ModelConfig, TrainConfig};
use epihybrid::model::Family;
use serde_json::Value;

use crate::CliError;

pub const SEED_ENV: &str = "EPIHYB_SEED";

pub const DEFAULT_HORIZONS: &str = "2,5,8,11,14,17,20,23,26,29,32";

/// A registered key. `default` is `None` for required keys.
#[derive(Debug, Clone)]
pub struct Key {
    pub name: String,
    pub default: Option<String>,
    pub help: String,
}

fn key(name: &str, default: Option<&str>, help: &str) -> Key {
    Key {
        name: name.into(),
        default: default.map(Into::into),
        help: help.into(),
    }
}

fn general_keys() -> Vec<Key> {
    vec![
        key("family", Some("hybrid"), "model family: epignn, colagnn, hybrid, gar, var, lstm"),
        key("dataset", None, "dataset name (japan, us-regions, us-states, australia or any label with cases_file)"),
        key("data_dir", Some("$EPIHYB_DATA_DIR or ./data"), "directory holding the bundled dataset files"),
        key("cases_file", Some(""), "explicit case matrix path (overrides the bundled file)"),
        key("adjacency_file", Some(""), "explicit adjacency path (overrides the bundled file)"),
        key("granularity", Some("weekly"), "weekly or daily, for cases_file data"),
        key("split", Some("0.5,0.2,0.3"), "train,valid,test fractions"),
        key("window", Some("20"), "look-back window T"),
        key("horizon", Some("2"), "forecast horizon h for train/sweep"),
        key("horizons", Some(DEFAULT_HORIZONS), "horizon list for compare/ablate"),
        key("seed", Some("1"), "seed for train (falls back to EPIHYB_SEED)"),
        key("seeds", Some("1,2,3"), "seeds for compare/ablate/sweep; the median is reported"),
        key("batch_size", Some("128"), "mini-batch size"),
        key("max_epochs", Some("1500"), "epoch cap"),
        key("patience", Some("100"), "early-stopping patience in epochs"),
        key("lr", Some("0.001"), "Adam learning rate"),
        key("families", Some("epignn,colagnn,hybrid"), "families for compare"),
        key("sweep_param", Some("filters"), "lookback, filters, lr or rnn_dim"),
        key("sweep_values", Some("default"), "comma-separated values, or default for the standard grid"),
        key("checkpoint", Some(""), "checkpoint for evaluate/heatmap"),
        key("heatmap_source", Some("learned"), "learned (model graph over the test split) or geo"),
        key("heatmap_matrix", Some("hybrid"), "hybrid, dynamic, spatial or external"),
        key("out", Some("runs/<timestamp>"), "output directory"),
        key("jobs", Some("1"), "parallel jobs for multi-run commands"),
        key("timing", Some("false"), "record wall-clock seconds in result CSVs"),
    ]
}

fn family_fields(family: Family) -> serde_json::Map<String, Value> {
    match serde_json::to_value(ModelConfig::default_for(family)).expect("config serializes") {
        Value::Object(mut o) => match o.remove("config") {
            Some(Value::Object(fields)) => fields,
            _ => unreachable!("configs serialize as objects"),
        },
        _ => unreachable!("tagged enum serializes as an object"),
    }
}

/// Every key the toolkit understands, model keys as `<family>.<field>`.
pub fn registry() -> Vec<Key> {
    let mut keys = general_keys();
    for f in Family::ALL {
        for (field, v) in family_fields(f) {
            if field == "window" {
                continue;
            }
            keys.push(Key {
                name: format!("{f}.{field}"),
                default: Some(v.to_string()),
                help: String::new(),
            });
        }
    }
    keys
}

/// Text listing of every key and its default, for `--help`.
pub fn keys_help() -> String {
    let mut s = String::from("Config keys (key = default):\n");
    for k in registry() {
        let d = k.default.as_deref().unwrap_or("<required>");
        let d = if d.is_empty() { "<unset>" } else { d };
        if k.help.is_empty() {
            writeln!(s, "  {} = {}", k.name, d).unwrap();
        } else {
            writeln!(s, "  {} = {}    {}", k.name, d, k.help).unwrap();
        }
    }
    s
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_file(text: &str, path: &Path) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            CliError::Config(format!("{}:{}: expected key = value, found {line:?}", path.display(), i + 1))
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Resolved settings for one invocation.
#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    /// Layers `file` entries under `flags`; rejects keys not in the registry.
    pub fn resolve(file: &[(String, String)], flags: &[(String, String)], env_seed: Option<String>) -> Result<Self, CliError> {
        let known: Vec<String> = registry().into_iter().map(|k| k.name).collect();
        let mut values = BTreeMap::new();
        for (k, v) in file.iter().chain(flags) {
            if !known.contains(k) {
                return Err(CliError::Config(format!("unknown config key {k:?}")));
            }
            values.insert(k.clone(), v.clone());
        }
        if let Some(s) = env_seed {
            values.entry("seed".to_string()).or_insert(s);
        }
        Ok(RunConfig { values })
    }

    /// Explicitly set value, ignoring defaults.
    pub fn explicit(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str).filter(|v| !v.is_empty())
    }

    fn get(&self, key: &str) -> String {
        if let Some(v) = self.explicit(key) {
            return v.to_string();
        }
        general_keys()
            .into_iter()
            .find(|k| k.name == key)
            .and_then(|k| k.default)
            .unwrap_or_default()
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.get(key);
        v.parse().map_err(|e| CliError::Config(format!("{key} = {v:?}: {e}")))
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.get(key);
        let items = v
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|e| CliError::Config(format!("{key} = {v:?}: {s:?}: {e}"))))
            .collect::<Result<Vec<T>, _>>()?;
        if items.is_empty() {
            return Err(CliError::Config(format!("{key} is empty")));
        }
        Ok(items)
    }

    pub fn family(&self) -> Result<Family, CliError> {
        self.parsed("family")
    }

    pub fn families(&self) -> Result<Vec<Family>, CliError> {
        self.list("families")
    }

    pub fn dataset(&self) -> Result<String, CliError> {
        self.explicit("dataset")
            .map(str::to_string)
            .ok_or_else(|| CliError::Config("missing required key `dataset`".into()))
    }

    pub fn bundled(&self) -> Option<DatasetName> {
        self.explicit("dataset").and_then(|d| d.parse().ok())
    }

    pub fn data_dir(&self) -> PathBuf {
        self.explicit("data_dir").map(PathBuf::from).unwrap_or_else(DatasetName::default_dir)
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.explicit(key).map(PathBuf::from)
    }

    pub fn granularity(&self) -> Result<Granularity, CliError> {
        match self.get("granularity").as_str() {
            "weekly" => Ok(Granularity::Weekly),
            "daily" => Ok(Granularity::Daily),
            other => Err(CliError::Config(format!("granularity = {other:?}: expected weekly or daily"))),
        }
    }

    pub fn split(&self) -> Result<SplitSpec, CliError> {
        let f: Vec<f64> = self.list("split")?;
        match f[..] {
            [train, valid, test] => Ok(SplitSpec { train, valid, test }),
            _ => Err(CliError::Config(format!("split needs three fractions, got {}", f.len()))),
        }
    }

    pub fn window(&self) -> Result<usize, CliError> {
        self.parsed("window")
    }

    pub fn horizon(&self) -> Result<usize, CliError> {
        self.parsed("horizon")
    }

    pub fn horizons(&self) -> Result<Vec<usize>, CliError> {
        self.list("horizons")
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.parsed("seed")
    }

    pub fn seeds(&self) -> Result<Vec<u64>, CliError> {
        self.list("seeds")
    }

    pub fn jobs(&self) -> Result<usize, CliError> {
        self.parsed("jobs")
    }

    pub fn timing(&self) -> Result<bool, CliError> {
        self.parsed("timing")
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let cfg = TrainConfig {
            batch_size: self.parsed("batch_size")?,
            max_epochs: self.parsed("max_epochs")?,
            patience: self.parsed("patience")?,
            learning_rate: self.parsed("lr")?,
            ..TrainConfig::default()
        };
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn protocol(&self) -> Result<Protocol, CliError> {
        Ok(Protocol {
            train: self.train_config()?,
            seeds: self.seeds()?,
            jobs: self.jobs()?,
            timing: self.timing()?,
        })
    }

    pub fn sweep(&self) -> Result<(SweepParam, Vec<f64>), CliError> {
        let param: SweepParam = self.get("sweep_param").parse().map_err(CliError::Config)?;
        let values = match self.get("sweep_values").as_str() {
            "default" => param.default_values(),
            _ => self.list("sweep_values")?,
        };
        Ok((param, values))
    }

    pub fn heatmap(&self) -> (String, String) {
        (self.get("heatmap_source"), self.get("heatmap_matrix"))
    }

    pub fn out_dir(&self) -> PathBuf {
        match self.explicit("out") {
            Some(p) => PathBuf::from(p),
            None => {
                let secs = std::time::SystemTime::now()
                    .duration_since(std::time::UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0);
                PathBuf::from("runs").join(secs.to_string())
            }
        }
    }

    /// Model configuration for `family` with every `<family>.*` override and
    /// the shared `window` applied.
    pub fn model(&self, family: Family) -> Result<ModelConfig, CliError> {
        let mut fields = family_fields(family);
        let prefix = format!("{family}.");
        for (k, v) in &self.values {
            if let Some(field) = k.strip_prefix(&prefix) {
                fields.insert(field.to_string(), json_value(v));
            }
        }
        fields.insert("window".into(), Value::from(self.window()?));
        let tagged = serde_json::json!({ "family": family.key(), "config": fields });
        serde_json::from_value(tagged).map_err(|e| CliError::Config(format!("{family} settings: {e}")))
    }
}

/// Numbers, booleans and `null` parse as JSON; anything else is a string.
fn json_value(v: &str) -> Value {
    match v {
        "none" | "None" => Value::Null,
        _ => serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string())),
    }
}
