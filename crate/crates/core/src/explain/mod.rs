//! Grad-CAM maps over the patch tokens entering the final encoder block.

mod colormap;

use std::path::Path;

pub use colormap::JET;

use crate::data::write_png;
use crate::error::{Error, Result};
use crate::model::TransformerModel;
use crate::nn::{CHANNELS, N_CLASSES};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};

/// Overlay weight of the heatmap.
pub const OVERLAY_ALPHA: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    /// Patches per side.
    pub grid_side: usize,
    /// Row-major patch grid in `[0, 1]`.
    pub grid: Vec<f64>,
    /// Image side of the upsampled map.
    pub side: usize,
    /// Row-major image-sized map in `[0, 1]`.
    pub upsampled: Vec<f64>,
}

pub fn grad_cam<T: Scalar>(model: &TransformerModel<T>, image: &Tensor<T>, target_class: usize) -> Result<SaliencyMap> {
    grad_cam_with_shift(model, image, target_class, 0.0)
}

/// Grad-CAM with `shift` added to every logit before the target is picked.
pub fn grad_cam_with_shift<T: Scalar>(
    model: &TransformerModel<T>,
    image: &Tensor<T>,
    target_class: usize,
    shift: f64,
) -> Result<SaliencyMap> {
    if target_class >= N_CLASSES {
        return Err(Error::Contract(format!("target class {target_class} outside 0..{N_CLASSES}")));
    }
    let patches = model.patches(image)?;

    let activations = {
        let mut g = Graph::new();
        let p = model.params.bind(&mut g, false);
        let x = g.constant(patches);
        let z0 = model.embed(&mut g, &p, x, None)?;
        let a = model.encode_to_last(&mut g, &p, z0)?;
        g.value(a).clone()
    };

    let mut g = Graph::new();
    let p = model.params.bind(&mut g, false);
    let a = g.leaf(activations.clone(), true);
    let out = model.finish(&mut g, &p, a)?;
    let score = model.score(&mut g, &out)?;
    let shape = g.value(score).shape().to_vec();
    let offset = g.constant(Tensor::full(shape, T::c(shift)));
    let shifted = g.add(score, offset)?;
    let picked = g.slice_cols(shifted, target_class, 1)?;
    let target = g.sum(picked);
    g.backward(target)?;

    let (_, dim) = activations.dims2()?;
    let n_patches = model.config.n_patches();
    let rows = model.arch.embed.layout().patch_rows(n_patches);
    let zero = Tensor::zeros(activations.shape().to_vec());
    let grad = g.grad(a).unwrap_or(&zero);

    let mut weights = vec![0.0f64; dim];
    for t in rows.clone() {
        for (w, v) in weights.iter_mut().zip(grad.row(t)) {
            *w += v.to_f64().unwrap_or(0.0);
        }
    }
    for w in &mut weights {
        *w /= n_patches as f64;
    }
    let grid: Vec<f64> = rows
        .map(|t| {
            let v: f64 = activations
                .row(t)
                .iter()
                .zip(&weights)
                .map(|(a, w)| a.to_f64().unwrap_or(0.0) * w)
                .sum();
            v.max(0.0)
        })
        .collect();

    let grid_side = model.config.image_side / model.config.patch;
    let side = model.config.image_side;
    let grid = normalize_max(grid);
    let upsampled = normalize_max(upsample_bilinear(&grid, grid_side, side));
    Ok(SaliencyMap {
        grid_side,
        grid,
        side,
        upsampled,
    })
}

/// Divides by the maximum; an all-zero (or empty) map stays zero.
fn normalize_max(mut values: Vec<f64>) -> Vec<f64> {
    let max = values.iter().copied().fold(0.0f64, f64::max);
    if max > 0.0 {
        for v in &mut values {
            *v /= max;
        }
    }
    values
}

/// Bilinear resampling with pixel centers at half-integers, edges clamped.
pub fn upsample_bilinear(grid: &[f64], grid_side: usize, side: usize) -> Vec<f64> {
    let scale = grid_side as f64 / side as f64;
    let coord = |i: usize| {
        let c = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (grid_side - 1) as f64);
        let lo = c.floor() as usize;
        let hi = (lo + 1).min(grid_side - 1);
        (lo, hi, c - lo as f64)
    };
    let mut out = Vec::with_capacity(side * side);
    for y in 0..side {
        let (y0, y1, fy) = coord(y);
        for x in 0..side {
            let (x0, x1, fx) = coord(x);
            let top = grid[y0 * grid_side + x0] * (1.0 - fx) + grid[y0 * grid_side + x1] * fx;
            let bottom = grid[y1 * grid_side + x0] * (1.0 - fx) + grid[y1 * grid_side + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Jet color of a map value in `[0, 1]`.
pub fn colormap(value: f64) -> [u8; 3] {
    JET[(value.clamp(0.0, 1.0) * 255.0).round() as usize]
}

/// `round(0.5·image + 0.5·jet(map))` per channel.
pub fn overlay_pixels(pixels: &[u8], map: &SaliencyMap) -> Result<Vec<u8>> {
    if pixels.len() != map.side * map.side * CHANNELS {
        return Err(Error::Contract(format!(
            "{} image bytes for a {}×{} map",
            pixels.len(),
            map.side,
            map.side
        )));
    }
    Ok(pixels
        .chunks_exact(CHANNELS)
        .zip(&map.upsampled)
        .flat_map(|(px, &v)| {
            let c = colormap(v);
            (0..CHANNELS)
                .map(move |k| ((1.0 - OVERLAY_ALPHA) * px[k] as f64 + OVERLAY_ALPHA * c[k] as f64).round() as u8)
        })
        .collect())
}

pub fn overlay_png(pixels: &[u8], map: &SaliencyMap, path: &Path) -> Result<()> {
    let blended = overlay_pixels(pixels, map)?;
    write_png(path, map.side, map.side, &blended)
}
