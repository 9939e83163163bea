use std::path::Path;

use serde::Deserialize;

use super::sample::{read_image, resize_bilinear, ImageSample};
use crate::error::{Error, Result};
use crate::nn::N_CLASSES;

#[derive(Deserialize)]
struct Row {
    id_code: String,
    diagnosis: i64,
}

/// Reads `id_code,diagnosis` rows and the matching `<image_dir>/<id_code>.png`
/// files, resized to `side×side`.
pub fn ingest(manifest_csv: &Path, image_dir: &Path, side: usize) -> Result<Vec<ImageSample>> {
    let mut reader = csv::Reader::from_path(manifest_csv).map_err(|e| csv_error(manifest_csv, e))?;
    let mut out = Vec::new();
    for (i, row) in reader.deserialize::<Row>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::Validation(format!("{} row {line}: {e}", manifest_csv.display())))?;
        if !(0..N_CLASSES as i64).contains(&row.diagnosis) {
            return Err(Error::Validation(format!(
                "{} row {line}: diagnosis {} outside 0..{}",
                manifest_csv.display(),
                row.diagnosis,
                N_CLASSES - 1
            )));
        }
        let path = image_dir.join(format!("{}.png", row.id_code));
        let (w, h, pixels) = read_image(&path)?;
        let pixels = resize_bilinear(w, h, &pixels, side);
        out.push(ImageSample::new(row.id_code, side, pixels, row.diagnosis as usize)?);
    }
    Ok(out)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

/// Writes the manifest CSV and one PNG per sample under `dir`.
pub fn export(samples: &[ImageSample], dir: &Path) -> Result<()> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let csv_path = dir.join("labels.csv");
    let mut text = String::from("id_code,diagnosis\n");
    for s in samples {
        super::sample::write_png(&images.join(format!("{}.png", s.id)), s.side, s.side, &s.pixels)?;
        text.push_str(&format!("{},{}\n", s.id, s.label));
    }
    std::fs::write(&csv_path, text).map_err(|e| Error::io(&csv_path, e))
}
