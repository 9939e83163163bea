//! Contrast-limited adaptive histogram equalization on the luma channel.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::{key_of, substream};

pub const DEFAULT_TILES: usize = 8;
pub const DEFAULT_CLIP_LIMIT: f64 = 2.0;
pub const CLAHE_FRACTION: f64 = 0.3;

/// Equalization lookup table of one tile's pixels.
fn tile_lut(values: &[u8], clip_limit: f64) -> [f64; 256] {
    let mut hist = [0.0f64; 256];
    for &v in values {
        hist[v as usize] += 1.0;
    }
    let n = values.len() as f64;
    if clip_limit.is_finite() {
        let clip = (clip_limit * n / 256.0).max(1.0);
        let mut excess = 0.0;
        for h in hist.iter_mut() {
            if *h > clip {
                excess += *h - clip;
                *h = clip;
            }
        }
        let share = excess / 256.0;
        for h in hist.iter_mut() {
            *h += share;
        }
    }
    let mut lut = [0.0; 256];
    let mut cdf = 0.0;
    for (v, h) in hist.iter().enumerate() {
        cdf += h;
        lut[v] = (255.0 * cdf / n).clamp(0.0, 255.0);
    }
    lut
}

/// Luma-only CLAHE over a `tiles×tiles` grid with bilinear blending between
/// neighbouring tile mappings. Chroma (BT.601 Cb/Cr) is kept.
pub fn clahe(side: usize, pixels: &[u8], tiles: usize, clip_limit: f64) -> Result<Vec<u8>> {
    if tiles == 0 || tiles > side {
        return Err(Error::Config(format!(
            "{tiles}×{tiles} tiles do not fit a {side}×{side} image"
        )));
    }
    let n = side * side;
    let mut luma = vec![0.0f64; n];
    let mut cb = vec![0.0f64; n];
    let mut cr = vec![0.0f64; n];
    for i in 0..n {
        let (r, g, b) = (pixels[3 * i] as f64, pixels[3 * i + 1] as f64, pixels[3 * i + 2] as f64);
        luma[i] = 0.299 * r + 0.587 * g + 0.114 * b;
        cb[i] = -0.168_736 * r - 0.331_264 * g + 0.5 * b;
        cr[i] = 0.5 * r - 0.418_688 * g - 0.081_312 * b;
    }
    let y8: Vec<u8> = luma.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();

    // tile bounds: tile t covers [t·side/tiles, (t+1)·side/tiles)
    let bound = |t: usize| t * side / tiles;
    let mut luts = Vec::with_capacity(tiles * tiles);
    for ty in 0..tiles {
        for tx in 0..tiles {
            let mut vals = Vec::new();
            for y in bound(ty)..bound(ty + 1) {
                vals.extend_from_slice(&y8[y * side + bound(tx)..y * side + bound(tx + 1)]);
            }
            luts.push(tile_lut(&vals, clip_limit));
        }
    }

    let tile_size = side as f64 / tiles as f64;
    let locate = |p: usize| {
        let f = (p as f64 + 0.5) / tile_size - 0.5;
        let lo = f.floor();
        let w = f - lo;
        let lo = lo as isize;
        let clampi = |t: isize| t.clamp(0, tiles as isize - 1) as usize;
        (clampi(lo), clampi(lo + 1), w)
    };
    let mut out = vec![0u8; n * 3];
    for y in 0..side {
        let (ty0, ty1, wy) = locate(y);
        for x in 0..side {
            let (tx0, tx1, wx) = locate(x);
            let v = y8[y * side + x] as usize;
            let m = |ty: usize, tx: usize| luts[ty * tiles + tx][v];
            let top = m(ty0, tx0) * (1.0 - wx) + m(ty0, tx1) * wx;
            let bottom = m(ty1, tx0) * (1.0 - wx) + m(ty1, tx1) * wx;
            let yy = top * (1.0 - wy) + bottom * wy;
            let i = y * side + x;
            let rgb = [
                yy + 1.402 * cr[i],
                yy - 0.344_136 * cb[i] - 0.714_136 * cr[i],
                yy + 1.772 * cb[i],
            ];
            for c in 0..3 {
                out[3 * i + c] = rgb[c].round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Ok(out)
}

/// The deterministic `round(0.3·n)` subset of `ids` that receives CLAHE.
pub fn clahe_subset(ids: &[String], seed: u64) -> Vec<String> {
    let mut sorted: Vec<String> = ids.to_vec();
    sorted.sort();
    sorted.shuffle(&mut substream(seed, &[key_of("clahe")]));
    let k = (CLAHE_FRACTION * sorted.len() as f64).round() as usize;
    let mut chosen: Vec<String> = sorted.into_iter().take(k).collect();
    chosen.sort();
    chosen
}
