//! Experiment configuration, read from JSON or flat `key=value` text.
//!
//! Flat keys are dotted paths into the JSON form, e.g. `train.lr=3e-4`,
//! `prompt.kind=universal`, `seeds=[0,1,2]`. Values parse as JSON when
//! they can and are taken as strings otherwise. Lines starting with `#` are
//! ignored.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::dataset::DatasetSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::prompts::PromptSetting;
use crate::sampling::SamplerConfig;
use crate::training::{PromptConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerSpec {
    pub codes: usize,
    pub patch_size: usize,
    pub iters: usize,
    /// Images whose patches feed k-means (a prefix of a fixed shuffle).
    pub fit_images: usize,
    pub seed: u64,
}

impl Default for TokenizerSpec {
    fn default() -> Self {
        Self {
            codes: 64,
            patch_size: 4,
            iters: 20,
            fit_images: 512,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricSpec {
    /// Images generated per evaluation.
    pub n_gen: usize,
    pub knn_k: usize,
    /// Held-out images per class for perplexity.
    pub heldout_per_class: usize,
}

impl Default for MetricSpec {
    fn default() -> Self {
        Self {
            n_gen: 256,
            knn_k: 3,
            heldout_per_class: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// `tiny`, `small` or `paper_b`.
    pub preset: String,
    /// Overrides of the preset's layers / hidden / heads when non-zero.
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub dataset: DatasetSpec,
    /// Load images from this directory instead of rendering them.
    pub data_dir: Option<PathBuf>,
    pub tokenizer: TokenizerSpec,
    pub train: TrainConfig,
    pub prompt: PromptConfig,
    /// Prompt setting at sampling time; defaults to the training one.
    pub infer_prompt: Option<PromptSetting>,
    pub sampler: SamplerConfig,
    pub metrics: MetricSpec,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let train = TrainConfig {
            steps: 2000,
            batch_size: 8,
            ..Default::default()
        };
        Self {
            preset: "tiny".into(),
            layers: 0,
            hidden: 0,
            heads: 0,
            dataset: DatasetSpec::default(),
            data_dir: None,
            tokenizer: TokenizerSpec::default(),
            train,
            prompt: PromptConfig {
                kind: PromptSetting::Universal,
                length: 64,
                ..Default::default()
            },
            infer_prompt: None,
            sampler: SamplerConfig::default(),
            metrics: MetricSpec::default(),
            seeds: vec![0, 1, 2],
            out_dir: "runs".into(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if let Some(d) = &self.data_dir {
            if !d.join(super::dataset::LABEL_FILE).exists() {
                return Err(Error::Config(format!("data_dir {} has no labels.txt", d.display())));
            }
        }
        self.dataset.validate()?;
        self.train.validate()?;
        self.sampler.validate()?;
        self.base_model()?.validate()
    }

    /// Preset with overrides, before prompt-specific fields are set.
    pub fn base_model(&self) -> Result<ModelConfig> {
        let mut m = ModelConfig::preset(&self.preset, self.tokenizer.codes, self.dataset.classes)?;
        if self.layers > 0 {
            m.layers = self.layers;
        }
        if self.hidden > 0 {
            m.hidden = self.hidden;
        }
        if self.heads > 0 {
            m.heads = self.heads;
        }
        let g = self.dataset.image_size / self.tokenizer.patch_size;
        m.grid_h = g;
        m.grid_w = g;
        m.dropout = self.train.dropout;
        m.prompt_len = self.prompt.length;
        Ok(m)
    }

    pub fn infer_setting(&self) -> PromptSetting {
        self.infer_prompt.unwrap_or(self.prompt.kind)
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut root = Value::Object(Map::new());
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, val) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            set_path(&mut root, key.trim(), parse_value(val.trim()))
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        serde_json::from_value(root).map_err(|e| Error::Config(e.to_string()))
    }

    /// JSON when the file starts with `{`, flat key=value otherwise.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if text.trim_start().starts_with('{') {
            Self::from_json_str(&text)
        } else {
            Self::from_kv_str(&text)
        }
    }

    /// Applies `key=value` overrides on top of this config.
    pub fn with_overrides(&self, pairs: &[(String, String)]) -> Result<Self> {
        let mut root = self.to_json();
        for (k, v) in pairs {
            set_path(&mut root, k, parse_value(v)).map_err(Error::Config)?;
        }
        serde_json::from_value(root).map_err(|e| Error::Config(e.to_string()))
    }
}

fn parse_value(v: &str) -> Value {
    serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()))
}

fn set_path(root: &mut Value, key: &str, val: Value) -> std::result::Result<(), String> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(format!("malformed key `{key}`"));
    }
    let mut cur = root;
    for p in &parts[..parts.len() - 1] {
        let obj = cur.as_object_mut().ok_or_else(|| format!("`{key}` descends into a scalar"))?;
        cur = obj.entry(p.to_string()).or_insert_with(|| Value::Object(Map::new()));
        if cur.is_null() {
            *cur = Value::Object(Map::new());
        }
    }
    cur.as_object_mut()
        .ok_or_else(|| format!("`{key}` descends into a scalar"))?
        .insert(parts[parts.len() - 1].to_string(), val);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompts::LossPolicy;

    #[test]
    fn kv_and_json_agree() {
        let kv = "# comment\npreset=tiny\nprompt.kind=class\nprompt.length=16\nprompt.loss=image_only\ntrain.lr=0.0003\nseeds=[4,5]\n";
        let a = ExperimentConfig::from_kv_str(kv).unwrap();
        assert_eq!(a.prompt.kind, PromptSetting::Class);
        assert_eq!(a.prompt.length, 16);
        assert_eq!(a.prompt.loss, LossPolicy::ImageOnly);
        assert_eq!(a.train.lr, 3e-4);
        assert_eq!(a.seeds, vec![4, 5]);
        let b = ExperimentConfig::from_json_str(&serde_json::to_string(&a).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bad_values_are_config_errors() {
        assert!(ExperimentConfig::from_kv_str("prompt.kind=sometimes").is_err());
        assert!(ExperimentConfig::from_kv_str("no equals sign").is_err());
        let c = ExperimentConfig {
            seeds: vec![],
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
