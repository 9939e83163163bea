use std::collections::{HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::sample::ImageSample;
use crate::error::{Error, Result};
use crate::nn::N_CLASSES;
use crate::rng::{key_of, substream};

pub const TEST_FRACTION: f64 = 0.3;
pub const VAL_FRACTION: f64 = 0.1;
pub const MIN_PER_CLASS: usize = 10;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Per-class `(train, val, test)` sizes for a class of `n` samples.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let test = (TEST_FRACTION * n as f64).round() as usize;
    let trainval = n - test;
    let val = (VAL_FRACTION * trainval as f64).round() as usize;
    (trainval - val, val, test)
}

/// Splits every class independently: 30% test, then 10% of the rest for
/// validation.
pub fn stratified_split(samples: &[ImageSample], seed: u64) -> Result<SplitManifest> {
    let mut manifest = SplitManifest {
        seed,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    let mut seen = HashSet::new();
    for s in samples {
        if !seen.insert(s.id.as_str()) {
            return Err(Error::Validation(format!("duplicate sample id {}", s.id)));
        }
    }
    for class in 0..N_CLASSES {
        let mut ids: Vec<&str> = samples.iter().filter(|s| s.label == class).map(|s| s.id.as_str()).collect();
        if ids.len() < MIN_PER_CLASS {
            return Err(Error::Config(format!(
                "class {class} has {} samples; at least {MIN_PER_CLASS} are needed to split",
                ids.len()
            )));
        }
        ids.sort_unstable();
        ids.shuffle(&mut substream(seed, &[key_of("split"), class as u64]));
        let (train, val, _) = split_sizes(ids.len());
        for (i, id) in ids.into_iter().enumerate() {
            let dst = if i < train {
                &mut manifest.train
            } else if i < train + val {
                &mut manifest.val
            } else {
                &mut manifest.test
            };
            dst.push(id.to_string());
        }
    }
    manifest.train.sort();
    manifest.val.sort();
    manifest.test.sort();
    Ok(manifest)
}

impl SplitManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    /// Samples of one split, in manifest order.
    pub fn select<'a>(&self, samples: &'a [ImageSample], ids: &[String]) -> Result<Vec<&'a ImageSample>> {
        let by_id: HashMap<&str, &ImageSample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
        ids.iter()
            .map(|id| {
                by_id
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| Error::Validation(format!("split lists unknown sample {id}")))
            })
            .collect()
    }
}
