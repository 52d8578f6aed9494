//! The lab configuration file and dotted-path `key=value` overrides.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::GeneratorConfig;
use crate::error::{Error, Result};
use crate::experiment::ExperimentSettings;
use crate::train::TrainConfig;

/// Everything a CLI invocation can configure, as one JSON document.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabConfig {
    pub data: GeneratorConfig,
    pub train: TrainConfig,
    pub experiment: ExperimentSettings,
}

impl LabConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        self.experiment.validate()
    }

    /// Sets the data and training seeds together.
    pub fn set_seed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.train.seed = seed;
    }
}

/// Every dotted leaf path of `value`, in document order.
pub fn leaf_keys(value: &Value) -> Vec<String> {
    fn walk(v: &Value, prefix: &str, out: &mut Vec<String>) {
        match v {
            Value::Object(map) => {
                for (k, child) in map {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(child, &key, out);
                }
            }
            _ => out.push(prefix.to_string()),
        }
    }
    let mut out = Vec::new();
    walk(value, "", &mut out);
    out
}

/// Parses an override value as JSON, falling back to a bare string.
fn parse_scalar(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Replaces the value at dotted `key`. Unknown keys are rejected with the
/// full list of valid ones; `null` leaves (optional fields) accept any value.
pub fn set_path(root: &mut Value, key: &str, raw: &str) -> Result<()> {
    let valid = leaf_keys(root);
    let unknown = || Error::InvalidConfig(format!("unknown key '{key}'; valid keys: {}", valid.join(", ")));
    let mut node = &mut *root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map = node.as_object_mut().ok_or_else(unknown)?;
        let child = map.get_mut(*part).ok_or_else(unknown)?;
        if i + 1 == parts.len() {
            if child.is_object() {
                return Err(unknown());
            }
            *child = parse_scalar(raw);
            return Ok(());
        }
        node = child;
    }
    Err(unknown())
}

/// Applies `key=value` overrides to a serializable config and reads it back.
/// Type errors name the offending key.
pub fn with_overrides<T: Serialize + DeserializeOwned>(config: &T, overrides: &[String]) -> Result<T> {
    let mut value = serde_json::to_value(config)?;
    for ov in overrides {
        let (key, raw) = ov
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("override '{ov}' is not of the form key=value")))?;
        set_path(&mut value, key.trim(), raw.trim())?;
        serde_json::from_value::<T>(value.clone())
            .map_err(|e| Error::InvalidConfig(format!("bad value for '{}': {e}", key.trim())))?;
    }
    Ok(serde_json::from_value(value)?)
}

/// Reads a config file; fields left out keep their defaults.
pub fn load_json<T: DeserializeOwned>(path: &std::path::Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| {
        Error::InvalidConfig(format!(
            "{}: line {} column {}: {e}",
            path.display(),
            e.line(),
            e.column()
        ))
    })
}
