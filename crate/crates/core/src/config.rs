//! Pipeline configuration.
//!
//! Files are flat `key = value` lines with dotted keys (`assoc.lambda = 0.9`);
//! this is a subset of TOML, so any TOML table layout is accepted as well.
//! Later sources win: built-in defaults, the file, then `--section.key value`
//! overrides from the command line. Unknown keys are rejected by name.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::{Table, Value};

use crate::assoc::AssocParams;
use crate::kalman::KalmanParams;
use crate::metrics::DEFAULT_IOU_THRESHOLD;
use crate::mousemap::MouseMapParams;
use crate::tracker::{TrackerConfig, TrackerParams};
use crate::types::DEFAULT_EMBEDDING_DIM;

/// Environment variable naming the config file used when none is given.
pub const CONFIG_ENV: &str = "CAGETRACK_CONFIG";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config syntax error: {0}")]
    Syntax(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{key}`: {message}")]
    InvalidValue { key: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamParams {
    pub fps: f64,
    /// Expected embedding length; detections of another length are rejected.
    pub embedding_dim: usize,
}

impl Default for StreamParams {
    fn default() -> Self {
        StreamParams {
            fps: 30.0,
            embedding_dim: DEFAULT_EMBEDDING_DIM,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalParams {
    pub iou_threshold: f64,
}

impl Default for EvalParams {
    fn default() -> Self {
        EvalParams {
            iou_threshold: DEFAULT_IOU_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub stream: StreamParams,
    pub kalman: KalmanParams,
    pub assoc: AssocParams,
    pub tracker: TrackerParams,
    pub mousemap: MouseMapParams,
    pub eval: EvalParams,
}

impl Config {
    pub fn tracker_config(&self) -> TrackerConfig {
        TrackerConfig {
            kalman: self.kalman,
            assoc: self.assoc,
            tracker: self.tracker,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |key: &str, message: &str| {
            Err(ConfigError::InvalidValue {
                key: key.to_string(),
                message: message.to_string(),
            })
        };
        if !(self.stream.fps > 0.0 && self.stream.fps.is_finite()) {
            return invalid("stream.fps", "must be positive");
        }
        if self.stream.embedding_dim == 0 {
            return invalid("stream.embedding_dim", "must be positive");
        }
        if !(0.0..=1.0).contains(&self.assoc.lambda) {
            return invalid("assoc.lambda", "must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.assoc.ema_alpha) {
            return invalid("assoc.ema_alpha", "must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.assoc.match_threshold) {
            return invalid("assoc.match_threshold", "must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.assoc.appearance_gate) {
            return invalid("assoc.appearance_gate", "must lie in [0, 1]");
        }
        if self.tracker.n_init == 0 {
            return invalid("tracker.n_init", "must be at least 1");
        }
        let k = &self.kalman;
        for (key, v) in [
            ("kalman.std_weight_position", k.std_weight_position),
            ("kalman.std_weight_velocity", k.std_weight_velocity),
            ("kalman.aspect_std", k.aspect_std),
            ("kalman.aspect_vel_std", k.aspect_vel_std),
            ("kalman.aspect_measurement_std", k.aspect_measurement_std),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return invalid(key, "must be positive");
            }
        }
        if self.mousemap.n_identities == 0 || self.mousemap.n_identities > 3 {
            return invalid("mousemap.n_identities", "must lie in 1..=3");
        }
        if self.mousemap.window_minutes.is_nan() || self.mousemap.window_minutes < 0.0 {
            return invalid("mousemap.window_minutes", "must be non-negative");
        }
        if self.mousemap.dist_max_ratio.is_nan() || self.mousemap.dist_max_ratio < 0.0 {
            return invalid("mousemap.dist_max_ratio", "must be non-negative");
        }
        if !(self.eval.iou_threshold > 0.0 && self.eval.iou_threshold <= 1.0) {
            return invalid("eval.iou_threshold", "must lie in (0, 1]");
        }
        Ok(())
    }
}

/// Parses one override value: TOML literals are taken as typed, anything else as a string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn insert_dotted(table: &mut Table, key: &str, value: Value) -> Result<(), ConfigError> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let leaf = parts
        .pop()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        };
    }
    cur.insert(leaf.to_string(), value);
    Ok(())
}

fn flatten(prefix: &str, table: &Table, out: &mut Vec<(String, Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            _ => out.push((key, v.clone())),
        }
    }
}

/// Layered loader shared by the pipeline config and the scene config.
#[derive(Debug, Clone, Default)]
pub struct Layers {
    table: Table,
}

impl Layers {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn merge_str(&mut self, text: &str) -> Result<(), ConfigError> {
        let parsed: Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
        let mut flat = Vec::new();
        flatten("", &parsed, &mut flat);
        for (k, v) in flat {
            insert_dotted(&mut self.table, &k, v)?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        self.merge_str(&text)
    }

    pub fn set(&mut self, key: &str, raw: &str) -> Result<(), ConfigError> {
        insert_dotted(&mut self.table, key, parse_value(raw))
    }

    /// Deserializes into `T`, naming the first key that `T` does not know.
    pub fn build<T>(&self) -> Result<T, ConfigError>
    where
        T: DeserializeOwned + Serialize + Default,
    {
        let known = Table::try_from(T::default()).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        let mut flat = Vec::new();
        flatten("", &self.table, &mut flat);
        for (key, _) in &flat {
            if !has_path(&known, key) && !is_optional_path(&known, key) {
                return Err(ConfigError::UnknownKey(key.clone()));
            }
        }
        Value::Table(self.table.clone()).try_into().map_err(|e: toml::de::Error| {
            let key = flat.first().map(|(k, _)| k.clone()).unwrap_or_default();
            let message = e.message().to_string();
            let key = flat
                .iter()
                .map(|(k, _)| k)
                .find(|k| message.contains(k.rsplit('.').next().unwrap_or(k)))
                .cloned()
                .unwrap_or(key);
            ConfigError::InvalidValue { key, message }
        })
    }
}

fn has_path(table: &Table, key: &str) -> bool {
    let mut cur = table;
    let mut parts = key.split('.').peekable();
    while let Some(p) = parts.next() {
        match cur.get(p) {
            Some(Value::Table(t)) if parts.peek().is_some() => cur = t,
            Some(_) if parts.peek().is_none() => return true,
            _ => return false,
        }
    }
    false
}

/// Optional fields are absent from the serialized defaults; accept keys whose
/// section exists and whose leaf is a documented optional field.
fn is_optional_path(table: &Table, key: &str) -> bool {
    const OPTIONAL: &[&str] = &["classifier.confusion"];
    OPTIONAL.iter().any(|o| key == *o || key.starts_with(&format!("{o}."))) && has_path(table, key.split('.').next().unwrap_or(""))
}

/// Loads the pipeline config: defaults, then `path` (or the file named by
/// `CAGETRACK_CONFIG`), then overrides.
pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Config, ConfigError> {
    let mut layers = Layers::new();
    let env_path = std::env::var_os(CONFIG_ENV).map(PathBuf::from);
    if let Some(p) = path.map(Path::to_path_buf).or(env_path) {
        layers.merge_file(&p)?;
    }
    for (k, v) in overrides {
        layers.set(k, v)?;
    }
    let cfg: Config = layers.build()?;
    cfg.validate()?;
    Ok(cfg)
}
