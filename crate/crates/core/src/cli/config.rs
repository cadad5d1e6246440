use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::artifact::{config_hash, Provenance};
use crate::bench::BenchConfig;
use crate::curvature::CurvatureConfig;
use crate::data::{DataConfig, Splits};
use crate::error::{Error, Result};
use crate::model::{HeadConfig, ModelConfig};
use crate::train::TrainConfig;

/// Everything one invocation needs. `seed` is copied into every component
/// seed; `model.input_dim` and `model.classes` of 0 are filled from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub curvature: CurvatureConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig { input_dim: 0, classes: 0, head: HeadConfig::default(), ..ModelConfig::default() },
            train: TrainConfig::default(),
            curvature: CurvatureConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

#[derive(Serialize)]
struct Identity<'a> {
    seed: u64,
    data: &'a DataConfig,
    model: &'a ModelConfig,
    train: &'a TrainConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(format!("config: {e}")))
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str::<Value>(&text).map_err(|e| Error::config(format!("{}: {e}", p.display())))?
            }
            None => serde_json::to_value(RunConfig::default()).map_err(|e| Error::Internal(e.to_string()))?,
        };
        let defaults = serde_json::to_value(RunConfig::default()).map_err(|e| Error::Internal(e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, &defaults, o)?;
        }
        serde_json::from_value(value).map_err(|e| Error::config(format!("config: {e}")))
    }

    /// Propagates the top-level seed and fills data-derived model sizes.
    pub fn resolve(&mut self, splits: &Splits) -> Result<()> {
        self.model.seed = self.seed;
        self.train.seed = self.seed;
        self.curvature.seed = self.seed;
        self.bench.seed = self.seed;
        let (dim, classes) = (splits.train.dim(), splits.train.classes());
        if self.model.input_dim == 0 {
            self.model.input_dim = dim;
        }
        if self.model.classes == 0 {
            self.model.classes = classes;
        }
        if self.model.input_dim != dim || self.model.classes != classes {
            return Err(Error::config(format!(
                "model expects {} inputs and {} classes, data has {dim} and {classes}",
                self.model.input_dim, self.model.classes
            )));
        }
        self.model.validate()?;
        self.train.validate()?;
        Ok(())
    }

    /// Hash of the settings that determine a trained model: seed, data,
    /// model and training. Analysis settings are excluded so curvature,
    /// routing and bench artifacts carry the hash of the run they describe.
    pub fn identity_hash(&self) -> Result<String> {
        config_hash(&Identity { seed: self.seed, data: &self.data, model: &self.model, train: &self.train })
    }

    pub fn provenance(&self) -> Result<Provenance> {
        Ok(Provenance { config_hash: self.identity_hash()?, seed: self.seed })
    }
}

/// Parses a JSON literal, falling back to a bare string.
fn parse_literal(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Sets `a.b.c=value`. The path must exist in the config schema.
pub fn apply_override(target: &mut Value, schema: &Value, spec: &str) -> Result<()> {
    let (path, raw) =
        spec.split_once('=').ok_or_else(|| Error::usage(format!("override {spec:?} is not key=value")))?;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::usage(format!("override {spec:?} has an empty key")));
    }
    let mut schema_node = Some(schema);
    let mut node = target;
    for (i, key) in keys.iter().enumerate() {
        schema_node = schema_node.and_then(|s| s.get(key));
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::config(format!("override {path}: {} is not an object", keys[..i].join("."))))?;
        if !obj.contains_key(*key) && schema_node.is_none() {
            return Err(Error::config(format!("override {path}: unknown key {key:?}")));
        }
        if i + 1 == keys.len() {
            obj.insert(key.to_string(), parse_literal(raw));
            return Ok(());
        }
        node = obj
            .entry(key.to_string())
            .or_insert_with(|| schema_node.cloned().unwrap_or(Value::Object(Default::default())));
    }
    unreachable!("loop returns on the last key")
}
