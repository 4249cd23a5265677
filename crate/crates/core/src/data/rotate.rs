//! Exact quarter-turn rotation of whole frames with their annotations.

use std::fs;
use std::path::{Path, PathBuf};

use image::{imageops, RgbImage};

use super::{load_rgb, write_manifest, Manifest, SampleRecord};
use crate::error::{Error, Result};
use crate::geometry::Point2;

/// Rotates a continuous frame point clockwise by `turns` quarter turns.
pub fn rotate_frame_point(p: Point2<f64>, frame: (u32, u32), turns: u32) -> Point2<f64> {
    let (w, h) = (frame.0 as f64, frame.1 as f64);
    match turns % 4 {
        0 => p,
        1 => Point2::new(h - p.y, p.x),
        2 => Point2::new(w - p.x, h - p.y),
        _ => Point2::new(p.y, w - p.x),
    }
}

/// Rotates a normalized `[x_min, y_min, x_max, y_max]` box clockwise.
pub fn rotate_bbox(b: [f64; 4], turns: u32) -> [f64; 4] {
    let [x0, y0, x1, y1] = b;
    match turns % 4 {
        0 => b,
        1 => [1.0 - y1, x0, 1.0 - y0, x1],
        2 => [1.0 - x1, 1.0 - y1, 1.0 - x0, 1.0 - y0],
        _ => [y0, 1.0 - x1, y1, 1.0 - x0],
    }
}

pub fn rotate_sample(record: &SampleRecord, image: &RgbImage, turns: u32) -> Result<(SampleRecord, RgbImage)> {
    if image.dimensions() != record.frame() {
        return Err(Error::invalid(format!("{}: image size differs from the manifest", record.image)));
    }
    let rotated = match turns % 4 {
        0 => image.clone(),
        1 => imageops::rotate90(image),
        2 => imageops::rotate180(image),
        _ => imageops::rotate270(image),
    };
    let tips = record
        .fingertips_px()
        .map(|p| Some(rotate_frame_point(p, record.frame(), turns)));
    let mut out = record.clone();
    (out.width, out.height) = rotated.dimensions();
    out.bbox = rotate_bbox(record.bbox, turns);
    out.set_fingertips_px(&tips);
    Ok((out, rotated))
}

/// Writes a rotated copy of every record into `out_dir`; returns the new manifest path.
pub fn rotate_dataset(manifest: &Manifest, turns: u32, out_dir: &Path) -> Result<PathBuf> {
    let mut records = Vec::with_capacity(manifest.records.len());
    for record in &manifest.records {
        let image = load_rgb(&manifest.image_path(record))?;
        let (r, img) = rotate_sample(record, &image, turns)?;
        let path = out_dir.join(&r.image);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        img.save(&path).map_err(|source| Error::Image {
            path: path.clone(),
            source,
        })?;
        records.push(r);
    }
    let path = out_dir.join("manifest.jsonl");
    write_manifest(&path, &records)?;
    Ok(path)
}
