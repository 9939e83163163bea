//! Synthetic fundus-like images with a known number of lesions per class.

use rand::Rng as _;

use super::sample::ImageSample;
use crate::error::Result;
use crate::nn::N_CLASSES;
use crate::rng::{substream, Rng};

pub const SYNTH_SIDE: usize = 64;

/// Lesion centers are placed no further than this from the image center, so that
/// center cropping and rotation keep them in view.
pub const LESION_RADIUS: f64 = 13.0;

const FIELD_RADIUS: f64 = 30.0;
const DISC_DISTANCE: f64 = 20.0;
const DISC_RADIUS: f64 = 4.0;

/// A synthetic image plus its lesion footprint.
#[derive(Clone, Debug)]
pub struct SynthImage {
    pub sample: ImageSample,
    /// One flag per pixel, row-major.
    pub lesion_mask: Vec<bool>,
    pub lesion_count: usize,
}

/// Lesion count for class `k`: `3k + u` with `u ∈ {−1, 0, 1}`, none for class 0.
pub fn lesion_count(class: usize, rng: &mut Rng) -> usize {
    if class == 0 {
        0
    } else {
        (3 * class as i64 + rng.gen_range(-1..=1)) as usize
    }
}

/// Nominal lesion radius in pixels for class `k`; each lesion varies by ±10%.
pub fn lesion_radius(class: usize) -> f64 {
    1.5 + 0.75 * class as f64
}

/// Lesion colour for class `k ≥ 1`: brighter and whiter with severity, so the
/// class stays readable after the zooming center crop confuses sizes.
pub fn lesion_color(class: usize) -> [f64; 3] {
    let k = class as f64;
    let brightness = 0.80 + 0.04 * k;
    [250.0 * brightness, 235.0 * brightness, 40.0 + 60.0 * (k - 1.0)]
}

/// `n_per_class` images for each of the five classes, ids `synth_<class>_<i>`.
pub fn synth_generate(n_per_class: usize, seed: u64) -> Result<Vec<SynthImage>> {
    let mut out = Vec::with_capacity(n_per_class * N_CLASSES);
    for class in 0..N_CLASSES {
        for i in 0..n_per_class {
            let mut rng = substream(seed, &[class as u64, i as u64]);
            out.push(render(format!("synth_{class}_{i:04}"), class, &mut rng)?);
        }
    }
    Ok(out)
}

struct Canvas {
    px: Vec<f64>,
}

impl Canvas {
    fn blend(&mut self, x: usize, y: usize, color: [f64; 3], alpha: f64) {
        let i = (y * SYNTH_SIDE + x) * 3;
        for c in 0..3 {
            self.px[i + c] = self.px[i + c] * (1.0 - alpha) + color[c] * alpha;
        }
    }
}

fn inside_field(x: f64, y: f64) -> bool {
    let c = SYNTH_SIDE as f64 / 2.0;
    (x - c).hypot(y - c) <= FIELD_RADIUS
}

fn render(id: String, class: usize, rng: &mut Rng) -> Result<SynthImage> {
    let side = SYNTH_SIDE;
    let center = side as f64 / 2.0;
    let mut canvas = Canvas {
        px: vec![0.0; side * side * 3],
    };

    // retinal background with radial falloff
    let tint = [rng.gen_range(125.0..160.0), rng.gen_range(40.0..60.0), rng.gen_range(15.0..30.0)];
    for y in 0..side {
        for x in 0..side {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            if !inside_field(fx, fy) {
                continue;
            }
            let r = (fx - center).hypot(fy - center) / FIELD_RADIUS;
            let shade = 1.0 - 0.35 * r * r;
            canvas.blend(x, y, [tint[0] * shade, tint[1] * shade, tint[2] * shade], 1.0);
        }
    }

    // optic disc on a random side, away from the lesion zone
    let disc_angle = if rng.gen_bool(0.5) { 0.0 } else { std::f64::consts::PI } + rng.gen_range(-0.4..0.4);
    let disc = (
        center + DISC_DISTANCE * disc_angle.cos(),
        center + DISC_DISTANCE * disc_angle.sin(),
    );
    for y in 0..side {
        for x in 0..side {
            let d = (x as f64 + 0.5 - disc.0).hypot(y as f64 + 0.5 - disc.1);
            if d <= DISC_RADIUS + 1.0 {
                let alpha = (DISC_RADIUS + 1.0 - d).clamp(0.0, 1.0);
                canvas.blend(x, y, [235.0, 200.0, 160.0], alpha);
            }
        }
    }

    // vessel arcs leaving the disc
    for k in 0..4 {
        let up = if k % 2 == 0 { -1.0 } else { 1.0 };
        let spread = rng.gen_range(0.6..1.1) + 0.4 * (k / 2) as f64;
        let dir = if disc.0 > center { -1.0 } else { 1.0 };
        for step in 0..120 {
            let t = step as f64 / 119.0;
            let x = disc.0 + dir * t * 40.0;
            let y = disc.1 + up * spread * 14.0 * (t * std::f64::consts::PI * 0.9).sin();
            if !inside_field(x, y) {
                continue;
            }
            let (ix, iy) = (x as usize, y as usize);
            if ix < side && iy < side {
                canvas.blend(ix, iy, [105.0, 28.0, 22.0], 0.8);
            }
        }
    }

    // lesions
    let count = lesion_count(class, rng);
    let radius = lesion_radius(class);
    let color = lesion_color(class);
    let mut mask = vec![false; side * side];
    for _ in 0..count {
        let r = LESION_RADIUS * rng.gen_range(0.0f64..1.0).sqrt();
        let a = rng.gen_range(0.0..std::f64::consts::TAU);
        let (cx, cy) = (center + r * a.cos(), center + r * a.sin());
        let rr = radius * rng.gen_range(0.9..1.1);
        for y in 0..side {
            for x in 0..side {
                let d = (x as f64 + 0.5 - cx).hypot(y as f64 + 0.5 - cy);
                if d <= rr {
                    canvas.blend(x, y, color, 1.0);
                    mask[y * side + x] = true;
                }
            }
        }
    }

    // sensor noise inside the field
    let mut pixels = vec![0u8; side * side * 3];
    for y in 0..side {
        for x in 0..side {
            let inside = inside_field(x as f64 + 0.5, y as f64 + 0.5);
            for c in 0..3 {
                let i = (y * side + x) * 3 + c;
                let noise = if inside { rng.gen_range(-5.0..5.0) } else { 0.0 };
                pixels[i] = (canvas.px[i] + noise).round().clamp(0.0, 255.0) as u8;
            }
        }
    }

    Ok(SynthImage {
        sample: ImageSample::new(id, side, pixels, class)?,
        lesion_mask: mask,
        lesion_count: count,
    })
}
