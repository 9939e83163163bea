//! Run configuration: defaults, `key = value` files and flag overrides.

use std::path::{Path, PathBuf};

use eit_core::model::{ModelConfig, Preset, Variant};
use eit_core::train::{AdamWConfig, TrainConfig};
use eit_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// Every knob a command reads. Output locations are not part of it, so a
/// run reproduces regardless of where it writes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    /// Worker threads; 0 lets the pool decide.
    pub threads: usize,
    /// Dataset directory (`labels.csv` + `images/`); synthetic data when unset.
    pub data: Option<PathBuf>,
    pub n_per_class: usize,
    pub variants: Vec<Variant>,
    pub epochs: usize,
    pub patience: Option<usize>,
    /// Defaults to the preset's batch size.
    pub batch_size: Option<usize>,
    pub lr: f64,
    pub weight_decay: f64,
    pub augment: bool,
    pub depth: Option<usize>,
    pub heads: Option<usize>,
    pub grid_step: f64,
    /// Fixed ensemble weights; tuned on the validation split when unset.
    pub alpha: Option<Vec<f64>>,
    pub vq_steps: usize,
    pub vq_lr: f64,
    pub mim_epochs: usize,
    /// Masked-token pre-training before BEiT fine-tuning.
    pub pretrain: bool,
    pub sweep_heads: Vec<usize>,
    pub gradcam_images: usize,
    pub gradcam_variant: Variant,
}

impl Default for RunConfig {
    fn default() -> Self {
        let optim = AdamWConfig::default();
        Self {
            preset: Preset::Desk,
            seed: 0,
            threads: 0,
            data: None,
            n_per_class: 30,
            variants: Variant::ALL.to_vec(),
            epochs: 200,
            patience: None,
            batch_size: None,
            lr: optim.lr,
            weight_decay: optim.weight_decay,
            augment: true,
            depth: None,
            heads: None,
            grid_step: eit_core::ensemble::DEFAULT_GRID_STEP,
            alpha: None,
            vq_steps: 200,
            vq_lr: 1e-2,
            mim_epochs: 30,
            pretrain: true,
            sweep_heads: vec![2, 4, 6],
            gradcam_images: 5,
            gradcam_variant: Variant::Vit,
        }
    }
}

/// Parses `key = value` lines; `#` starts a comment. Values are JSON, with
/// bare words accepted as strings.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, Value)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("config line {}: expected key = value", i + 1)))?;
        out.push((key.trim().to_string(), parse_value(value.trim())));
    }
    Ok(out)
}

pub fn parse_value(text: &str) -> Value {
    serde_json::from_str(text).unwrap_or_else(|_| Value::String(text.to_string()))
}

impl RunConfig {
    /// Defaults, then the config file, then `overrides` in order.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, Value)]) -> Result<Self> {
        let mut entries = Vec::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
            entries.extend(parse_config_text(&text)?);
        }
        entries.extend(overrides.iter().cloned());
        Self::default().with_entries(&entries)
    }

    pub fn with_entries(&self, entries: &[(String, Value)]) -> Result<Self> {
        let Value::Object(mut map) = serde_json::to_value(self).expect("config serializes") else {
            unreachable!("struct serializes to an object")
        };
        for (key, value) in entries {
            if !map.contains_key(key) {
                return Err(Error::Config(format!("unknown config key {key:?}")));
            }
            map.insert(key.clone(), value.clone());
        }
        let cfg: Self = serde_json::from_value(Value::Object(map)).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(Error::Config("variants must not be empty".into()));
        }
        if self.batch_size == Some(0) {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("lr must be positive and weight_decay nonnegative".into()));
        }
        if self.sweep_heads.iter().any(|&h| h == 0) {
            return Err(Error::Config("sweep_heads entries must be positive".into()));
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size.unwrap_or_else(|| self.preset.batch_size())
    }

    pub fn model_config(&self, variant: Variant) -> ModelConfig {
        let mut cfg = ModelConfig::new(variant, self.preset);
        if let Some(d) = self.depth {
            cfg = cfg.with_depth(d);
        }
        if let Some(h) = self.heads {
            cfg = cfg.with_heads(h);
        }
        cfg
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut tc = TrainConfig::new(self.batch_size(), self.seed);
        tc.epochs = self.epochs;
        tc.patience = self.patience;
        tc.augment = self.augment;
        tc.optim.lr = self.lr;
        tc.optim.weight_decay = self.weight_decay;
        tc
    }

    /// `# key = value` lines for report headers.
    pub fn header(&self, command: &str) -> String {
        let Value::Object(map) = serde_json::to_value(self).expect("config serializes") else {
            unreachable!()
        };
        header_lines(command, &map)
    }
}

fn header_lines(command: &str, map: &Map<String, Value>) -> String {
    let mut out = format!("# eit {command}\n");
    for (k, v) in map {
        out.push_str(&format!("# {k} = {v}\n"));
    }
    out
}
