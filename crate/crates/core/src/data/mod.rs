//! Images, synthetic data, splits, augmentation and CLAHE.

pub mod augment;
pub mod clahe;
pub mod ingest;
pub mod sample;
pub mod split;
pub mod synth;

pub use augment::{augment, AugmentPlan};
pub use clahe::{clahe, clahe_subset, DEFAULT_CLIP_LIMIT, DEFAULT_TILES};
pub use ingest::{export, ingest};
pub use sample::{class_histogram, read_image, write_png, ImageSample};
pub use split::{split_sizes, stratified_split, SplitManifest};
pub use synth::{synth_generate, SynthImage, SYNTH_SIDE};

use crate::error::Result;

/// The three splits as owned samples, with CLAHE applied to the seeded 30%
/// subset of the training split.
#[derive(Clone, Debug)]
pub struct PreparedSplits {
    pub train: Vec<ImageSample>,
    pub val: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
}

pub fn prepare_splits(samples: &[ImageSample], manifest: &SplitManifest) -> Result<PreparedSplits> {
    let chosen = clahe_subset(&manifest.train, manifest.seed);
    let train = manifest
        .select(samples, &manifest.train)?
        .into_iter()
        .map(|s| {
            if chosen.binary_search(&s.id).is_ok() {
                Ok(s.with_pixels(clahe(s.side, &s.pixels, DEFAULT_TILES.min(s.side), DEFAULT_CLIP_LIMIT)?))
            } else {
                Ok(s.clone())
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let owned = |ids: &[String]| -> Result<Vec<ImageSample>> {
        Ok(manifest.select(samples, ids)?.into_iter().cloned().collect())
    };
    Ok(PreparedSplits {
        train,
        val: owned(&manifest.val)?,
        test: owned(&manifest.test)?,
    })
}
