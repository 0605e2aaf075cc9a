//! Pipeline configuration and its line-oriented `key = value` text form, with
//! dotted keys addressing nested fields.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::densify::DensifyConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::losses::{LossWeights, MvConfig};
use crate::meshing::TsdfConfig;
use crate::rasterizer::RasterConfig;
use crate::scene::SeedConfig;
use crate::trainer::TrainConfig;

/// Every tunable of the pipeline, grouped by stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seeds: SeedConfig,
    pub train: TrainConfig,
    pub raster: RasterConfig,
    pub densify: DensifyConfig,
    pub loss: LossWeights,
    pub mv: MvConfig,
    pub tsdf: TsdfConfig,
    pub eval: EvalConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.seeds.validate()?;
        self.train.validate()?;
        self.raster.validate()?;
        self.densify.validate()?;
        self.loss.validate()?;
        self.mv.validate()?;
        self.tsdf.validate()?;
        self.eval.validate()
    }

    /// Uses one RNG seed for every stochastic stage.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seeds.seed = seed;
        self.train.seed = seed;
        self.eval.seed = seed;
        self
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        apply_file(&mut cfg, path)?;
        cfg.validate().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(cfg)
    }

    /// Applies `key = value` text on top of the current values and validates.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        apply_text(self, text)?;
        self.validate()
    }

    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        set_key(self, key, value)
    }

    pub fn to_text(&self) -> String {
        to_text(self)
    }
}

/// Applies every `key = value` line of `text` to `target`. Keys are dotted
/// paths into the serialized structure; blank lines and `#` comments are
/// ignored and unknown keys are errors.
pub fn apply_text<T: Serialize + DeserializeOwned>(target: &mut T, text: &str) -> Result<()> {
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected `key = value`", no + 1)))?;
        set_key(target, key.trim(), value.trim()).map_err(|m| Error::InvalidConfig(format!("line {}: {m}", no + 1)))?;
    }
    Ok(())
}

pub fn apply_file<T: Serialize + DeserializeOwned>(target: &mut T, path: &Path) -> Result<()> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    apply_text(target, &text).map_err(|e| match e {
        Error::InvalidConfig(m) => Error::format(path, m),
        other => other,
    })
}

/// Sets one dotted key from its textual value; `target` is untouched on error.
pub fn set_key<T: Serialize + DeserializeOwned>(target: &mut T, key: &str, value: &str) -> std::result::Result<(), String> {
    let mut tree = serde_json::to_value(&*target).map_err(|e| e.to_string())?;
    let mut slot = &mut tree;
    for part in key.split('.') {
        slot = match slot {
            Value::Object(map) => map.get_mut(part),
            _ => None,
        }
        .ok_or_else(|| format!("unknown key `{key}`"))?;
    }
    *slot = parse_value(slot, value).ok_or_else(|| format!("bad value `{value}` for `{key}`"))?;
    *target = serde_json::from_value(tree).map_err(|e| format!("{key}: {e}"))?;
    Ok(())
}

/// Text form that [`apply_text`] reads back exactly.
pub fn to_text<T: Serialize>(value: &T) -> String {
    fn walk(prefix: &str, v: &Value, out: &mut String) {
        match v {
            Value::Object(map) => {
                for (k, child) in map {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, child, out);
                }
            }
            Value::String(s) => out.push_str(&format!("{prefix} = {s}\n")),
            other => out.push_str(&format!("{prefix} = {other}\n")),
        }
    }
    let mut out = String::new();
    walk("", &serde_json::to_value(value).expect("config serializes"), &mut out);
    out
}

fn parse_value(current: &Value, text: &str) -> Option<Value> {
    match current {
        Value::Bool(_) => text.parse::<bool>().ok().map(Value::Bool),
        Value::Number(n) if n.is_u64() => text.parse::<u64>().ok().map(Value::from),
        Value::Number(n) if n.is_i64() => text.parse::<i64>().ok().map(Value::from),
        Value::Number(_) => text
            .parse::<f64>()
            .ok()
            .and_then(serde_json::Number::from_f64)
            .map(Value::Number),
        Value::String(_) => Some(Value::String(text.trim_matches('"').to_string())),
        _ => None,
    }
}
