//! JSON Lines manifest: one annotated frame per line.
//!
//! ```json
//! {"image": "images/00000.png", "width": 640, "height": 480,
//!  "bbox": [0.31, 0.22, 0.58, 0.71],
//!  "fingertips": [[0.35, 0.30], null, [0.45, 0.23], null, null]}
//! ```
//!
//! Coordinates are normalized to the full frame; `null` marks an absent finger.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, FingertipSet, Point2, FINGER_COUNT};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub image: String,
    pub width: u32,
    pub height: u32,
    pub bbox: [f64; 4],
    pub fingertips: [Option<[f64; 2]>; FINGER_COUNT],
}

impl SampleRecord {
    pub fn bbox(&self) -> Result<BoundingBox<f64>> {
        BoundingBox::from_array(self.bbox)
    }

    pub fn frame(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    /// Fingertips in original-frame pixels.
    pub fn fingertips_px(&self) -> FingertipSet<f64> {
        let mut out = FingertipSet::empty();
        for (o, t) in out.slots.iter_mut().zip(&self.fingertips) {
            *o = t.map(|[x, y]| Point2::new(x * self.width as f64, y * self.height as f64));
        }
        out
    }

    pub fn set_fingertips_px(&mut self, tips: &FingertipSet<f64>) {
        let (w, h) = (self.width as f64, self.height as f64);
        for (o, t) in self.fingertips.iter_mut().zip(&tips.slots) {
            *o = t.map(|p| [p.x / w, p.y / h]);
        }
    }

    /// Schema check; returns warnings for soft violations.
    pub fn validate(&self) -> std::result::Result<Vec<String>, String> {
        if self.image.is_empty() {
            return Err("empty image path".into());
        }
        if self.width == 0 || self.height == 0 {
            return Err("frame dimensions must be positive".into());
        }
        let [x0, y0, x1, y1] = self.bbox;
        if !self.bbox.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(format!("bbox {:?} not normalized to [0, 1]", self.bbox));
        }
        if !(x0 < x1) {
            return Err(format!("bbox x_min {x0} must be < x_max {x1}"));
        }
        if !(y0 < y1) {
            return Err(format!("bbox y_min {y0} must be < y_max {y1}"));
        }
        let mut warnings = Vec::new();
        for (i, t) in self.fingertips.iter().enumerate() {
            if let Some([x, y]) = t {
                if !(x.is_finite() && y.is_finite() && (0.0..=1.0).contains(x) && (0.0..=1.0).contains(y)) {
                    return Err(format!("fingertip {i} ({x}, {y}) not normalized to [0, 1]"));
                }
                if *x < x0 || *x > x1 || *y < y0 || *y > y1 {
                    warnings.push(format!("fingertip {i} lies outside the bbox"));
                }
            }
        }
        Ok(warnings)
    }
}

/// How strictly [`load_manifest`] treats problems.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct ManifestOptions {
    /// Skip invalid lines (reporting them) instead of failing.
    pub lenient: bool,
    /// Promote "fingertip outside bbox" from a warning to a violation.
    pub require_tips_in_bbox: bool,
}

impl ManifestOptions {
    pub fn strict() -> Self {
        Self {
            lenient: false,
            require_tips_in_bbox: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestIssue {
    pub line: usize,
    pub message: String,
}

#[derive(Clone, Debug, Default)]
pub struct Manifest {
    pub path: PathBuf,
    pub records: Vec<SampleRecord>,
    /// Lines skipped in lenient mode.
    pub skipped: Vec<ManifestIssue>,
    pub warnings: Vec<ManifestIssue>,
}

impl Manifest {
    /// Directory that relative image paths resolve against.
    pub fn root(&self) -> &Path {
        self.path.parent().unwrap_or_else(|| Path::new("."))
    }

    pub fn image_path(&self, record: &SampleRecord) -> PathBuf {
        self.root().join(&record.image)
    }
}

pub fn load_manifest(path: &Path, opts: ManifestOptions) -> Result<Manifest> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Manifest {
        path: path.to_path_buf(),
        ..Default::default()
    };
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<SampleRecord>(&line)
            .map_err(|e| format!("malformed record: {e}"))
            .and_then(|r| {
                let warnings = r.validate()?;
                if opts.require_tips_in_bbox && !warnings.is_empty() {
                    return Err(warnings.join("; "));
                }
                Ok((r, warnings))
            });
        match parsed {
            Ok((record, warnings)) => {
                out.warnings.extend(warnings.into_iter().map(|message| ManifestIssue {
                    line: lineno,
                    message,
                }));
                out.records.push(record);
            }
            Err(message) if opts.lenient => {
                log::warn!("{}:{lineno}: skipped: {message}", path.display());
                out.skipped.push(ManifestIssue {
                    line: lineno,
                    message,
                });
            }
            Err(message) => {
                return Err(Error::Manifest {
                    path: path.to_path_buf(),
                    line: lineno,
                    message,
                })
            }
        }
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r)?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
