//! Run configuration. On disk it is a flat JSON object with dotted keys
//! (`"train.lr": 0.005`); missing keys take their defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::adapters::AdapterConfig;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::toybench::BenchConfig;

/// Initialization of the region-to-word projection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjInit {
    /// Stand-in for a detector head already aligned with the word space.
    #[default]
    Identity,
    Gaussian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Cosine-logit temperature of the classifier.
    pub tau: f64,
    /// Temperature of the distillation similarities.
    pub distill_tau: f64,
    pub bag_size: usize,
    /// Multiplier on the box positional embedding added to bag tokens.
    pub pos_scale: f64,
    pub proj_init: ProjInit,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            tau: 100.0,
            distill_tau: 100.0,
            bag_size: 4,
            pos_scale: 0.1,
            proj_init: ProjInit::Identity,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    pub batch_scenes: usize,
    pub eval_interval: usize,
    pub distill_weight: f64,
    pub unfrozen_tail: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.005,
            momentum: 0.9,
            weight_decay: 0.000025,
            iterations: 2000,
            batch_scenes: 2,
            eval_interval: 500,
            distill_weight: 1.0,
            unfrozen_tail: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Run directory, relative to the output root unless absolute.
    pub dir: String,
    pub metrics: String,
    pub checkpoint: String,
    pub benchmark: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: "run".into(),
            metrics: "metrics.csv".into(),
            checkpoint: "final.ckpt".into(),
            benchmark: "bench.bin".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub adapter: AdapterConfig,
    pub train: TrainConfig,
    pub bench: BenchConfig,
    pub output: OutputConfig,
}

fn flatten_into(prefix: &str, v: &Value, out: &mut Map<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_into(&key, child, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        m.encoder.validate()?;
        self.adapter.validate(m.encoder.width)?;
        self.bench.validate()?;
        if self.bench.d_region != m.encoder.width {
            return Err(Error::config(format!(
                "bench.d_region {} must equal model.encoder.width {}",
                self.bench.d_region, m.encoder.width
            )));
        }
        if !m.encoder.width.is_multiple_of(8) {
            return Err(Error::config("encoder width must be a multiple of 8 for box encodings"));
        }
        if !(m.tau > 0.0) || !(m.distill_tau > 0.0) {
            return Err(Error::config("temperatures must be positive"));
        }
        if m.bag_size == 0 {
            return Err(Error::config("model.bag_size must be at least 1"));
        }
        if !m.pos_scale.is_finite() {
            return Err(Error::config("model.pos_scale must be finite"));
        }
        let t = &self.train;
        for (name, v) in [("lr", t.lr), ("momentum", t.momentum), ("weight_decay", t.weight_decay), ("distill_weight", t.distill_weight)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("train.{name} = {v} must be finite and non-negative")));
            }
        }
        if t.batch_scenes == 0 || t.batch_scenes > self.bench.train_scenes {
            return Err(Error::config(format!("train.batch_scenes {} out of range", t.batch_scenes)));
        }
        if t.eval_interval == 0 {
            return Err(Error::config("train.eval_interval must be positive"));
        }
        if t.unfrozen_tail > m.encoder.layers {
            return Err(Error::config(format!(
                "train.unfrozen_tail {} exceeds {} layers",
                t.unfrozen_tail, m.encoder.layers
            )));
        }
        Ok(())
    }

    /// Fully resolved configuration as flat dotted keys.
    pub fn to_flat(&self) -> Map<String, Value> {
        let mut out = Map::new();
        flatten_into("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&Value::Object(self.to_flat())).expect("config serializes");
        s.push('\n');
        s
    }

    /// Applies flat overrides on top of the defaults. Unknown keys and
    /// wrongly typed values are config errors.
    pub fn from_flat(flat: &Map<String, Value>) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in flat {
            cfg = cfg.with_override(k, v.clone())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text).map_err(|e| Error::config(format!("config is not JSON: {e}")))?;
        match v {
            Value::Object(m) => Self::from_flat(&m),
            _ => Err(Error::config("config must be a JSON object")),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Replaces one dotted key. Does not re-validate.
    pub fn with_override(&self, key: &str, value: Value) -> Result<Self> {
        let mut flat = self.to_flat();
        match flat.get(key) {
            Some(old) if old.is_object() => return Err(Error::config(format!("{key} is a section"))),
            Some(_) => {}
            None => return Err(Error::config(format!("unknown config key {key}"))),
        }
        flat.insert(key.to_string(), value);
        let mut nested = Value::Object(Map::new());
        for (k, v) in flat {
            let mut slot = &mut nested;
            for part in k.split('.') {
                slot = slot
                    .as_object_mut()
                    .expect("sections are objects")
                    .entry(part.to_string())
                    .or_insert_with(|| Value::Object(Map::new()));
            }
            *slot = v;
        }
        serde_json::from_value(nested).map_err(|e| Error::config(format!("{key}: {e}")))
    }
}
