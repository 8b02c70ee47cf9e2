//! Run configuration as a flat `key = value` text file.
//!
//! Keys are dotted paths into [`RunConfig`] (`vit.embed_dim`,
//! `fusion.threshold`, ...). Arrays are comma separated. Lines starting
//! with `#` are comments. Unknown or repeated keys are rejected.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Number, Value};

use crate::cnn::CnnConfig;
use crate::eval::train::{CnnTrainConfig, VitTrainConfig};
use crate::fusion::FusionConfig;
use crate::patch::PatchConfig;
use crate::synth::{DatasetSize, GeneratorSpec};
use crate::vit::VitConfig;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvConfig {
    pub folds: usize,
    pub val_fraction: f64,
    /// Share of each test image's patch predictions, lowest saliency first,
    /// forced to the wrong label in the noisy comparison.
    pub flip_fraction: f64,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            val_fraction: 0.2,
            flip_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetSize,
    pub generator: GeneratorSpec,
    pub patch: PatchConfig,
    pub vit: VitConfig,
    pub vit_train: VitTrainConfig,
    pub cnn: CnnConfig,
    pub cnn_train: CnnTrainConfig,
    pub fusion: FusionConfig,
    pub cv: CvConfig,
}

impl Default for RunConfig {
    /// The reduced synthetic preset with desk-scale models.
    fn default() -> Self {
        let vit = VitConfig::desk();
        Self {
            seed: 7,
            dataset: DatasetSize::REDUCED,
            generator: GeneratorSpec::default(),
            patch: PatchConfig {
                input_size: vit.image_size,
                ..PatchConfig::default()
            },
            vit,
            vit_train: VitTrainConfig::default(),
            cnn: CnnConfig::default(),
            cnn_train: CnnTrainConfig::default(),
            fusion: FusionConfig::default(),
            cv: CvConfig::default(),
        }
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, Value)>) {
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        other => out.push((prefix.to_string(), other.clone())),
    }
}

fn render(v: &Value) -> String {
    match v {
        Value::Array(items) => items.iter().map(render).collect::<Vec<_>>().join(", "),
        Value::String(s) => s.clone(),
        Value::Null => String::new(),
        other => other.to_string(),
    }
}

fn parse_like(template: &Value, text: &str) -> std::result::Result<Value, String> {
    let text = text.trim();
    match template {
        Value::Bool(_) => text
            .parse::<bool>()
            .map(Value::Bool)
            .map_err(|_| format!("expected true or false, got `{text}`")),
        Value::Number(n) if n.is_u64() => text
            .parse::<u64>()
            .map(|v| Value::Number(v.into()))
            .map_err(|_| format!("expected a nonnegative integer, got `{text}`")),
        Value::Number(_) => text
            .parse::<f64>()
            .ok()
            .and_then(Number::from_f64)
            .map(Value::Number)
            .ok_or_else(|| format!("expected a number, got `{text}`")),
        Value::String(_) => Ok(Value::String(text.to_string())),
        Value::Array(items) => {
            let elem = items.first().cloned().unwrap_or(Value::Number(0.into()));
            text.split(',')
                .map(|t| parse_like(&elem, t))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map(Value::Array)
        }
        Value::Null | Value::Object(_) => Err("key cannot be set from text".into()),
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) {
    let mut cur = root;
    for part in key.split('.') {
        cur = cur
            .as_object_mut()
            .and_then(|m: &mut Map<String, Value>| m.get_mut(part))
            .expect("path checked against template");
    }
    *cur = value;
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.vit.validate()?;
        self.cnn.validate()?;
        FusionConfig::new(self.fusion.threshold)?;
        if self.patch.input_size != self.vit.image_size {
            return Err(Error::Config(format!(
                "patch.input_size {} must equal vit.image_size {}",
                self.patch.input_size, self.vit.image_size
            )));
        }
        if self.patch.patch_size != self.generator.patch_size {
            return Err(Error::Config(format!(
                "patch.patch_size {} differs from generator.patch_size {}",
                self.patch.patch_size, self.generator.patch_size
            )));
        }
        if !(0.0..=1.0).contains(&self.cv.flip_fraction) {
            return Err(Error::Config("cv.flip_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Every key with its resolved value, one per line.
    pub fn to_kv(&self) -> String {
        let mut flat = vec![];
        flatten("", &serde_json::to_value(self).expect("config serializes"), &mut flat);
        flat.iter()
            .map(|(k, v)| format!("{k} = {}\n", render(v)))
            .collect()
    }

    /// Applies `text` on top of the defaults.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut root = serde_json::to_value(Self::default())?;
        let mut flat = vec![];
        flatten("", &root, &mut flat);
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| Error::ConfigParse {
                line: i + 1,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let key = key.trim();
            let template = flat
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v)
                .ok_or_else(|| err(format!("unknown key `{key}`")))?;
            if !seen.insert(key.to_string()) {
                return Err(err(format!("duplicate key `{key}`")));
            }
            let parsed = parse_like(template, value).map_err(|m| err(format!("{key}: {m}")))?;
            set_path(&mut root, key, parsed);
        }
        let cfg: Self = serde_json::from_value(root).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_kv(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_kv()).map_err(|e| Error::io(path, e))
    }
}
