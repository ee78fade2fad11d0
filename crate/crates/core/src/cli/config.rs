//! Run configuration as a flat map of dotted keys.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::cache::CachePolicy;
use crate::decoder::{DecodeConfig, DecodeVariant};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::sequence::SequenceVariant;
use crate::simworld::DEFAULT_MAX_STEPS;
use crate::trainer::{CodecConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub max_steps: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig { max_steps: DEFAULT_MAX_STEPS }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub trace: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            dataset: "episodes.jsonl".into(),
            checkpoint: "model.ckpt".into(),
            log: "train_log.csv".into(),
            trace: "trace.csv".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub cache: CachePolicy,
    pub codec: CodecConfig,
    pub sim: SimConfig,
    pub paths: PathsConfig,
}

fn flatten_into(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_into(&key, v, out);
            }
        }
        leaf => {
            out.insert(prefix.to_string(), leaf.clone());
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let mut node = &mut root;
        let mut parts = key.split('.').peekable();
        while let Some(p) = parts.next() {
            if parts.peek().is_none() {
                node.insert(p.to_string(), v.clone());
            } else {
                node = node
                    .entry(p.to_string())
                    .or_insert_with(|| Value::Object(Map::new()))
                    .as_object_mut()
                    .expect("prefix keys are objects");
            }
        }
    }
    Value::Object(root)
}

impl RunConfig {
    /// Every key with its current value.
    pub fn flatten(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        flatten_into("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out
    }

    fn apply(&mut self, overrides: BTreeMap<String, Value>) -> Result<()> {
        let mut flat = self.flatten();
        for (k, v) in overrides {
            match flat.get_mut(&k) {
                Some(slot) => *slot = v,
                None => return Err(Error::Config(format!("unknown key `{k}`"))),
            }
        }
        *self = serde_json::from_value(unflatten(&flat)).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Parses a JSON object of dotted keys (nested objects are flattened first).
    pub fn from_json(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if !v.is_object() {
            return Err(Error::Config("config must be a JSON object".into()));
        }
        let mut flat = BTreeMap::new();
        flatten_into("", &v, &mut flat);
        let mut cfg = RunConfig::default();
        cfg.apply(flat)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Applies `key=value`; the value is read as JSON, falling back to a string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got `{assignment}`")))?;
        let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
        self.apply(BTreeMap::from([(k.trim().to_string(), value)]))
    }

    pub fn to_flat_json(&self) -> String {
        serde_json::to_string_pretty(&self.flatten()).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(Error::Config)?;
        self.train.validate()?;
        self.decode.validate()?;
        self.cache.validate()?;
        if self.codec.patch == 0 || self.codec.codebook_size == 0 || self.codec.text_len == 0 {
            return Err(Error::Config("codec.patch, codec.codebook_size and codec.text_len must be positive".into()));
        }
        let nwm = self.train.variant == SequenceVariant::NoWorldModel;
        if nwm != (self.decode.variant == DecodeVariant::NoWorldModel) {
            return Err(Error::Config(format!(
                "decode.variant {:?} is incompatible with train.variant {:?}",
                self.decode.variant, self.train.variant
            )));
        }
        Ok(())
    }
}
