use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{N_CLASSES, CHANNELS};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One labelled square RGB image, 8 bits per channel, row-major `(y, x, c)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSample {
    pub id: String,
    pub side: usize,
    pub pixels: Vec<u8>,
    pub label: usize,
}

impl ImageSample {
    pub fn new(id: impl Into<String>, side: usize, pixels: Vec<u8>, label: usize) -> Result<Self> {
        if pixels.len() != side * side * CHANNELS {
            return Err(Error::Validation(format!(
                "{} bytes do not fill a {side}×{side} RGB image",
                pixels.len()
            )));
        }
        if label >= N_CLASSES {
            return Err(Error::Validation(format!("label {label} outside 0..{N_CLASSES}")));
        }
        Ok(Self {
            id: id.into(),
            side,
            pixels,
            label,
        })
    }

    /// Pixels scaled to `[0, 1]`, shape `side×side×3`.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        pixels_to_tensor(self.side, &self.pixels)
    }

    pub fn with_pixels(&self, pixels: Vec<u8>) -> Self {
        Self {
            pixels,
            ..self.clone()
        }
    }
}

pub fn pixels_to_tensor<T: Scalar>(side: usize, pixels: &[u8]) -> Tensor<T> {
    let inv = T::c(1.0 / 255.0);
    Tensor::new(
        [side, side, CHANNELS],
        pixels.iter().map(|&v| T::c(v as f64) * inv).collect(),
    )
    .expect("pixel count checked by ImageSample")
}

/// Per-class sample counts.
pub fn class_histogram(samples: &[ImageSample]) -> [usize; N_CLASSES] {
    let mut h = [0; N_CLASSES];
    for s in samples {
        h[s.label] += 1;
    }
    h
}

pub fn write_png(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let img: RgbImage = ImageBuffer::from_raw(width as u32, height as u32, pixels.to_vec()).ok_or_else(|| {
        Error::Validation(format!("{} bytes do not fill a {width}×{height} RGB image", pixels.len()))
    })?;
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })
}

/// Decodes any supported image to RGB8; returns `(width, height, pixels)`.
pub fn read_image(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })?;
    let rgb = img.to_rgb8();
    Ok((rgb.width() as usize, rgb.height() as usize, rgb.into_raw()))
}

/// Bilinear resampling of an RGB8 buffer to a square `side×side`.
pub fn resize_bilinear(width: usize, height: usize, pixels: &[u8], side: usize) -> Vec<u8> {
    if width == side && height == side {
        return pixels.to_vec();
    }
    let img: ImageBuffer<Rgb<u8>, Vec<u8>> =
        ImageBuffer::from_raw(width as u32, height as u32, pixels.to_vec()).expect("buffer size");
    image::imageops::resize(&img, side as u32, side as u32, image::imageops::FilterType::Triangle).into_raw()
}
