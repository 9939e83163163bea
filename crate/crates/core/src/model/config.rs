use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::N_CLASSES;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Vit,
    Deit,
    Cait,
    Beit,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Vit, Variant::Deit, Variant::Cait, Variant::Beit];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Vit => "vit",
            Variant::Deit => "deit",
            Variant::Cait => "cait",
            Variant::Beit => "beit",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?} (expected vit, deit, cait or beit)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    Desk,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Paper => "paper",
            Preset::Desk => "desk",
        }
    }

    pub fn batch_size(self) -> usize {
        match self {
            Preset::Paper => 32,
            Preset::Desk => 8,
        }
    }

    /// Visual-token vocabulary of the masked-modeling tokenizer.
    pub fn vocab_size(self) -> usize {
        match self {
            Preset::Paper => 512,
            Preset::Desk => 32,
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            _ => Err(Error::Config(format!("unknown preset {s:?} (expected paper or desk)"))),
        }
    }
}

/// Number of class-attention blocks in the CaiT head stage.
pub const CLASS_ATTENTION_DEPTH: usize = 2;

pub const LAYER_SCALE_INIT: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub preset: Preset,
    pub image_side: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub n_classes: usize,
}

impl ModelConfig {
    pub fn new(variant: Variant, preset: Preset) -> Self {
        let (image_side, patch, dim, depth, heads) = match preset {
            Preset::Paper => (256, 64, 384, 12, 6),
            Preset::Desk => (64, 16, 64, 4, 4),
        };
        Self {
            variant,
            preset,
            image_side,
            patch,
            dim,
            depth,
            heads,
            n_classes: N_CLASSES,
        }
    }

    pub fn with_depth(mut self, depth: usize) -> Self {
        self.depth = depth;
        self
    }

    pub fn with_heads(mut self, heads: usize) -> Self {
        self.heads = heads;
        self
    }

    pub fn with_dim(mut self, dim: usize) -> Self {
        self.dim = dim;
        self
    }

    pub fn n_patches(&self) -> usize {
        let per_side = self.image_side / self.patch;
        per_side * per_side
    }

    pub fn patch_width(&self) -> usize {
        self.patch * self.patch * crate::nn::CHANNELS
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image_side == 0 || self.image_side % self.patch != 0 {
            return Err(Error::Config(format!(
                "image side {} must be a positive multiple of patch width {}",
                self.image_side, self.patch
            )));
        }
        if self.heads == 0 || self.dim == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embedding dimension {} must be divisible by head count {}",
                self.dim, self.heads
            )));
        }
        if self.depth == 0 {
            return Err(Error::Config("at least one encoder block is required".into()));
        }
        if self.n_classes != N_CLASSES {
            return Err(Error::Config(format!("n_classes must be {N_CLASSES}, got {}", self.n_classes)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets() {
        let p = ModelConfig::new(Variant::Vit, Preset::Paper);
        assert_eq!((p.image_side, p.patch, p.dim, p.depth, p.heads), (256, 64, 384, 12, 6));
        assert_eq!(p.n_patches(), 16);
        assert_eq!(p.patch_width(), 12288);
        let d = ModelConfig::new(Variant::Cait, Preset::Desk);
        assert_eq!((d.image_side, d.patch, d.dim, d.depth, d.heads), (64, 16, 64, 4, 4));
        p.validate().unwrap();
        d.validate().unwrap();
    }

    #[test]
    fn indivisible_heads_rejected() {
        let c = ModelConfig::new(Variant::Vit, Preset::Desk).with_heads(6);
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("resnet".parse::<Variant>().is_err());
    }
}
