use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use asap3d::optimizer::{LossSettings, LossWeights, NeighborhoodMode};
use asap3d::{Error, Result};

/// Loss configuration accepted by `--weights`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsConfig {
    pub lambda_vs: f64,
    pub lambda_d: f64,
    pub lambda_n: f64,
    pub lambda_e: f64,
    pub consistency: bool,
    pub clip: bool,
    pub neighborhood: NeighborhoodMode,
}

impl Default for WeightsConfig {
    fn default() -> Self {
        let s = LossSettings::default();
        WeightsConfig {
            lambda_vs: s.weights.lambda_vs,
            lambda_d: s.weights.lambda_d,
            lambda_n: s.weights.lambda_n,
            lambda_e: s.weights.lambda_e,
            consistency: s.weights.consistency,
            clip: s.clip,
            neighborhood: s.neighborhood,
        }
    }
}

impl WeightsConfig {
    pub fn settings(&self, levels: usize) -> LossSettings {
        LossSettings {
            weights: LossWeights {
                lambda_vs: self.lambda_vs,
                lambda_d: self.lambda_d,
                lambda_n: self.lambda_n,
                lambda_e: self.lambda_e,
                consistency: self.consistency,
            },
            levels,
            clip: self.clip,
            neighborhood: self.neighborhood,
        }
    }
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let start: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    (start + column.saturating_sub(1)).min(text.len())
}

/// Parses JSON text, reporting syntax errors with their byte offset.
pub fn parse_json(text: &str, what: &str) -> Result<Value> {
    serde_json::from_str(text).map_err(|e| Error::Parse {
        what: what.to_string(),
        offset: byte_offset(text, e.line(), e.column()),
        msg: e.to_string(),
    })
}

/// Overrides fields of `base` with the keys of the JSON object in `path`.
/// Keys that `base` does not have are rejected.
pub fn apply_json<T: Serialize + DeserializeOwned>(base: &T, path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let what = path.display().to_string();
    let overrides = parse_json(&text, &what)?;
    let Value::Object(overrides) = overrides else {
        return Err(Error::Validation(format!("{what}: expected a JSON object")));
    };
    let Value::Object(mut merged) = serde_json::to_value(base).expect("configs serialize") else {
        unreachable!("configs serialize to objects");
    };
    for (k, v) in overrides {
        if !merged.contains_key(&k) {
            let known: Vec<&str> = merged.keys().map(String::as_str).collect();
            return Err(Error::Validation(format!("{what}: unknown key '{k}' (expected one of {})", known.join(", "))));
        }
        merged.insert(k, v);
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| Error::Validation(format!("{what}: {e}")))
}
