//! Training-time augmentation. Each operation fires independently with
//! probability 0.5, in a fixed order: center crop, horizontal flip, vertical
//! flip, rotation, brightness, contrast.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::sample::ImageSample;
use crate::rng::Rng;

pub const CROP_FRACTION: f64 = 0.5;
pub const MAX_ROTATION_DEG: f64 = 45.0;
pub const MAX_BRIGHTNESS_DELTA: f64 = 0.95;
pub const CONTRAST_RANGE: (f64, f64) = (0.1, 0.9);
const P_APPLY: f64 = 0.5;

/// Which operations run, with their drawn parameters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentPlan {
    pub crop: bool,
    pub hflip: bool,
    pub vflip: bool,
    pub rotation_deg: Option<f64>,
    /// Fraction of full scale added to every channel.
    pub brightness: Option<f64>,
    pub contrast: Option<f64>,
}

impl AugmentPlan {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn draw(rng: &mut Rng) -> Self {
        let mut fire = || rng.gen_bool(P_APPLY);
        let (crop, hflip, vflip, rot, bright, contrast) = (fire(), fire(), fire(), fire(), fire(), fire());
        Self {
            crop,
            hflip,
            vflip,
            rotation_deg: rot.then(|| rng.gen_range(0.0..=MAX_ROTATION_DEG)),
            brightness: bright.then(|| rng.gen_range(-MAX_BRIGHTNESS_DELTA..=MAX_BRIGHTNESS_DELTA)),
            contrast: contrast.then(|| rng.gen_range(CONTRAST_RANGE.0..=CONTRAST_RANGE.1)),
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::none()
    }

    pub fn apply(&self, side: usize, pixels: &[u8]) -> Vec<u8> {
        if self.is_identity() {
            return pixels.to_vec();
        }
        let mut img = Plane::from_bytes(side, pixels);
        if self.crop {
            img = img.center_crop_resize(CROP_FRACTION);
        }
        if self.hflip {
            img = img.hflip();
        }
        if self.vflip {
            img = img.vflip();
        }
        if let Some(deg) = self.rotation_deg {
            img = img.rotate(deg);
        }
        if let Some(delta) = self.brightness {
            img.brightness(delta);
        }
        if let Some(f) = self.contrast {
            img.contrast(f);
        }
        img.to_bytes()
    }
}

/// Draws a plan and applies it.
pub fn augment(sample: &ImageSample, rng: &mut Rng) -> ImageSample {
    let plan = AugmentPlan::draw(rng);
    sample.with_pixels(plan.apply(sample.side, &sample.pixels))
}

/// Float RGB working image, values on the 0–255 scale.
#[derive(Clone, Debug)]
pub struct Plane {
    pub side: usize,
    pub px: Vec<f64>,
}

impl Plane {
    pub fn from_bytes(side: usize, pixels: &[u8]) -> Self {
        Self {
            side,
            px: pixels.iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.px.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect()
    }

    fn at(&self, x: isize, y: isize, c: usize) -> f64 {
        let s = self.side as isize;
        if x < 0 || y < 0 || x >= s || y >= s {
            0.0
        } else {
            self.px[((y * s + x) as usize) * 3 + c]
        }
    }

    /// Bilinear sample at continuous pixel-index coordinates; outside is black.
    fn sample(&self, x: f64, y: f64, c: usize) -> f64 {
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let (ix, iy) = (x0 as isize, y0 as isize);
        let top = self.at(ix, iy, c) * (1.0 - fx) + if fx > 0.0 { self.at(ix + 1, iy, c) * fx } else { 0.0 };
        if fy == 0.0 {
            return top;
        }
        let bottom = self.at(ix, iy + 1, c) * (1.0 - fx) + if fx > 0.0 { self.at(ix + 1, iy + 1, c) * fx } else { 0.0 };
        top * (1.0 - fy) + bottom * fy
    }

    fn map(&self, f: impl Fn(f64, f64) -> (f64, f64)) -> Self {
        let n = self.side;
        let mut px = vec![0.0; n * n * 3];
        for y in 0..n {
            for x in 0..n {
                let (sx, sy) = f(x as f64, y as f64);
                for c in 0..3 {
                    px[(y * n + x) * 3 + c] = self.sample(sx, sy, c);
                }
            }
        }
        Self { side: n, px }
    }

    /// Keeps the central `fraction` of each side and scales it back up.
    pub fn center_crop_resize(&self, fraction: f64) -> Self {
        let n = self.side as f64;
        let crop = (n * fraction).round().max(1.0);
        let offset = ((n - crop) / 2.0).floor();
        let scale = crop / n;
        let last = crop - 1.0;
        self.map(|x, y| {
            let sx = ((x + 0.5) * scale - 0.5).clamp(0.0, last) + offset;
            let sy = ((y + 0.5) * scale - 0.5).clamp(0.0, last) + offset;
            (sx, sy)
        })
    }

    pub fn hflip(&self) -> Self {
        let n = self.side as f64 - 1.0;
        self.map(|x, y| (n - x, y))
    }

    pub fn vflip(&self) -> Self {
        let n = self.side as f64 - 1.0;
        self.map(|x, y| (x, n - y))
    }

    /// Counter-clockwise rotation about the image center; corners fill black.
    pub fn rotate(&self, degrees: f64) -> Self {
        let (s, c) = degrees.to_radians().sin_cos();
        let mid = (self.side as f64 - 1.0) / 2.0;
        self.map(|x, y| {
            let (dx, dy) = (x - mid, y - mid);
            (c * dx - s * dy + mid, s * dx + c * dy + mid)
        })
    }

    /// Adds `delta·255` to every channel, clamped.
    pub fn brightness(&mut self, delta: f64) {
        for v in &mut self.px {
            *v = (*v + delta * 255.0).clamp(0.0, 255.0);
        }
    }

    /// Scales each channel's deviation from its mean by `factor`, clamped.
    pub fn contrast(&mut self, factor: f64) {
        let n = (self.px.len() / 3) as f64;
        for c in 0..3 {
            let mean = self.px.iter().skip(c).step_by(3).sum::<f64>() / n;
            for v in self.px.iter_mut().skip(c).step_by(3) {
                *v = ((*v - mean) * factor + mean).clamp(0.0, 255.0);
            }
        }
    }
}
