//! Dataset loading shared by the commands.

use std::collections::HashMap;
use std::path::Path;

use eit_core::data::{
    export, ingest, prepare_splits, stratified_split, synth_generate, ImageSample, PreparedSplits, SplitManifest,
    SYNTH_SIDE,
};
use eit_core::model::{ModelConfig, Variant};
use eit_core::Result;

use crate::config::RunConfig;

pub const LABELS_FILE: &str = "labels.csv";
pub const IMAGES_DIR: &str = "images";
pub const SPLIT_FILE: &str = "split.json";

pub struct Dataset {
    pub samples: Vec<ImageSample>,
    pub split: SplitManifest,
    /// Lesion footprints of synthetic images, by id.
    pub lesion_masks: HashMap<String, Vec<bool>>,
}

impl Dataset {
    pub fn prepare(&self) -> Result<PreparedSplits> {
        prepare_splits(&self.samples, &self.split)
    }

    /// Samples of a named split (`train`, `val`, `test` or `all`), unprocessed.
    pub fn split_samples(&self, which: &str) -> Result<Vec<ImageSample>> {
        let ids = match which {
            "train" => &self.split.train,
            "val" => &self.split.val,
            "test" => &self.split.test,
            "all" => return Ok(self.samples.clone()),
            other => {
                return Err(eit_core::Error::Config(format!(
                    "unknown split {other:?} (expected train, val, test or all)"
                )))
            }
        };
        Ok(self.split.select(&self.samples, ids)?.into_iter().cloned().collect())
    }
}

pub fn image_side(cfg: &RunConfig) -> usize {
    ModelConfig::new(Variant::Vit, cfg.preset).image_side
}

/// Synthetic images at the preset's resolution, with their masks.
pub fn synthetic(cfg: &RunConfig) -> Result<(Vec<ImageSample>, HashMap<String, Vec<bool>>)> {
    let side = image_side(cfg);
    let mut samples = Vec::new();
    let mut masks = HashMap::new();
    for s in synth_generate(cfg.n_per_class, cfg.seed)? {
        let sample = if side == SYNTH_SIDE {
            s.sample
        } else {
            let pixels = eit_core::data::sample::resize_bilinear(SYNTH_SIDE, SYNTH_SIDE, &s.sample.pixels, side);
            ImageSample::new(s.sample.id.clone(), side, pixels, s.sample.label)?
        };
        if side == SYNTH_SIDE {
            masks.insert(sample.id.clone(), s.lesion_mask);
        }
        samples.push(sample);
    }
    Ok((samples, masks))
}

/// The configured dataset directory, or synthetic data from the seed.
/// A stored `split.json` wins over a fresh split.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.data {
        Some(dir) => {
            let samples = ingest(&dir.join(LABELS_FILE), &dir.join(IMAGES_DIR), image_side(cfg))?;
            let split_path = dir.join(SPLIT_FILE);
            let split = if split_path.exists() {
                SplitManifest::load(&split_path)?
            } else {
                stratified_split(&samples, cfg.seed)?
            };
            Ok(Dataset {
                samples,
                split,
                lesion_masks: HashMap::new(),
            })
        }
        None => {
            let (samples, lesion_masks) = synthetic(cfg)?;
            let split = stratified_split(&samples, cfg.seed)?;
            Ok(Dataset {
                samples,
                split,
                lesion_masks,
            })
        }
    }
}

/// Writes a dataset directory readable by [`load_dataset`].
pub fn write_dataset(dir: &Path, samples: &[ImageSample], split: &SplitManifest) -> Result<()> {
    export(samples, dir)?;
    split.save(&dir.join(SPLIT_FILE))
}
