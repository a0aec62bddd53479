//! The single run configuration shared by every command, with dotted-key overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::head::{AssignmentConfig, DecodeConfig};
use crate::postprocess::{ComposeConfig, NmsConfig};
use crate::synth::SynthConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Dataset directory holding `features.json`, payloads and `annotations.json`.
    pub data_dir: PathBuf,
    /// Directory for checkpoints, predictions and reports.
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { data_dir: PathBuf::from("data"), out_dir: PathBuf::from("runs") }
    }
}

impl PathsConfig {
    pub fn manifest(&self) -> PathBuf {
        self.data_dir.join("features.json")
    }

    pub fn annotations(&self) -> PathBuf {
        self.data_dir.join("annotations.json")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub thresholds: Vec<f64>,
    /// `(k, tIoU)` pairs for Recall@kx.
    pub recall: Vec<(usize, f64)>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { thresholds: vec![0.3, 0.4, 0.5, 0.6, 0.7], recall: vec![(1, 0.5), (5, 0.5)] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Training seeds averaged per variant.
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { seeds: vec![0, 1, 2] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: PathsConfig,
    pub synth: SynthConfig,
    pub model: EncoderConfig,
    pub assign: AssignmentConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub nms: NmsConfig,
    pub compose: ComposeConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn set_dotted(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur.as_object_mut().ok_or_else(|| Error::Config(format!("{key}: {part} is not a section")))?;
        let slot = obj.get_mut(*part).ok_or_else(|| Error::Config(format!("unknown config key {key}")))?;
        if i + 1 == parts.len() {
            *slot = value;
            return Ok(());
        }
        cur = slot;
    }
    Err(Error::Config(format!("empty config key {key:?}")))
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

impl RunConfig {
    /// Reads `path` (if any), then applies `key=value` overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let base = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                let cfg: RunConfig =
                    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                cfg
            }
            None => RunConfig::default(),
        };
        let cfg = base.with_overrides(overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut value = serde_json::to_value(self).map_err(|e| Error::Config(e.to_string()))?;
        for ov in overrides {
            let (k, v) = ov.split_once('=').ok_or_else(|| Error::Config(format!("override {ov:?} is not key=value")))?;
            set_dotted(&mut value, k.trim(), parse_value(v.trim()))?;
        }
        serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        self.assign.validate()?;
        self.train.validate()?;
        self.nms.validate()?;
        if self.compose.top_k == 0 {
            return Err(Error::Config("compose.top_k must be at least 1".into()));
        }
        if self.eval.thresholds.is_empty() || self.eval.thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Config("eval.thresholds must be non-empty and within [0, 1]".into()));
        }
        if self.eval.recall.iter().any(|(k, t)| *k == 0 || !(0.0..=1.0).contains(t)) {
            return Err(Error::Config("eval.recall needs k >= 1 and tIoU within [0, 1]".into()));
        }
        if self.ablation.seeds.is_empty() {
            return Err(Error::Config("ablation.seeds must not be empty".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Every leaf key with its default value, in dotted form.
    pub fn documented_keys() -> Vec<(String, String)> {
        let mut out = Vec::new();
        flatten("", &RunConfig::default().to_json(), &mut out);
        out
    }
}
