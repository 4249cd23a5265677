//! Deterministic synthetic hand images with exact fingertip annotations.
//!
//! Each frame has a textured background, an elliptical palm and one to five
//! capsule-shaped fingers radiating from it. Every finger ends in a disk with
//! a bright white core fading to a slot-specific rim color, so the tip is the
//! brightest point of its neighborhood and the slot can be told apart from
//! appearance alone (which keeps slots identifiable under flips).

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{write_manifest, SampleRecord};
use crate::error::{Error, Result};
use crate::geometry::{Point2, FINGER_COUNT};

/// Rim colors of the fingertip disks, in slot order.
pub const TIP_COLORS: [[u8; 3]; FINGER_COUNT] = [
    [255, 40, 40],
    [40, 230, 40],
    [50, 110, 255],
    [255, 220, 30],
    [230, 50, 230],
];

/// Direction of each finger relative to the hand axis, degrees.
const SLOT_ANGLES: [f64; FINGER_COUNT] = [-72.0, -30.0, -6.0, 18.0, 42.0];
/// Finger length relative to the palm radius.
const SLOT_LENGTHS: [f64; FINGER_COUNT] = [1.0, 1.45, 1.6, 1.45, 1.15];
/// Finger half-width relative to the palm radius.
const SLOT_WIDTHS: [f64; FINGER_COUNT] = [0.28, 0.22, 0.23, 0.21, 0.18];

/// Brightest background channel value the texture can produce.
const BACKGROUND_MAX: f64 = 170.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub count: usize,
    pub seed: u64,
    pub image_size: (u32, u32),
    /// Relative weights for 1..=5 visible fingers.
    pub finger_count_weights: [f64; FINGER_COUNT],
    /// Minimum max-channel difference between a tip center and the background under it.
    pub tip_contrast: u8,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 100,
            seed: 7,
            image_size: (640, 480),
            finger_count_weights: [1.0; FINGER_COUNT],
            tip_contrast: 80,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::invalid("synthetic count must be > 0"));
        }
        let w = &self.finger_count_weights;
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
            return Err(Error::invalid("finger_count_weights must be nonnegative and not all zero"));
        }
        if self.image_size.0 < 320 || self.image_size.1 < 320 {
            return Err(Error::invalid("synthetic frames must be at least 320x320"));
        }
        if self.tip_contrast as f64 > 255.0 - BACKGROUND_MAX {
            return Err(Error::invalid(format!(
                "tip_contrast above {} cannot be guaranteed",
                255.0 - BACKGROUND_MAX
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Finger {
    slot: usize,
    base: Point2<f64>,
    tip: Point2<f64>,
    half_width: f64,
    tip_radius: f64,
}

/// Geometry of one synthetic frame, before rasterization.
#[derive(Clone, Debug)]
pub struct Scene {
    index: usize,
    frame: (u32, u32),
    seed: u64,
    palm_center: Point2<f64>,
    palm_axes: (f64, f64),
    hand_angle: f64,
    skin: [f64; 3],
    fingers: Vec<Finger>,
    bbox_px: [f64; 4],
}

fn scene_rng(seed: u64, index: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((index as u64) << 1) | stream);
    rng
}

impl Scene {
    pub fn generate(cfg: &SynthConfig, index: usize) -> Self {
        let mut rng = scene_rng(cfg.seed, index, 0);
        let (w, h) = (cfg.image_size.0 as f64, cfg.image_size.1 as f64);
        let rx = rng.random_range(36.0..52.0);
        let ry = rx * rng.random_range(0.8..0.95);
        // mostly upright hands, as in an egocentric view
        let hand_angle = (-90.0f64 + rng.random_range(-40.0..40.0)).to_radians();

        let total: f64 = cfg.finger_count_weights.iter().sum();
        let mut pick = rng.random_range(0.0..total);
        let mut n_fingers = FINGER_COUNT;
        for (i, wgt) in cfg.finger_count_weights.iter().enumerate() {
            if pick < *wgt {
                n_fingers = i + 1;
                break;
            }
            pick -= wgt;
        }
        let mut slots = sample_indices(&mut rng, FINGER_COUNT, n_fingers).into_vec();
        slots.sort_unstable();

        let scale = rng.random_range(0.9..1.1);
        let mut fingers: Vec<Finger> = slots
            .into_iter()
            .map(|slot| {
                let a = hand_angle + (SLOT_ANGLES[slot] + rng.random_range(-4.0..4.0)).to_radians();
                let dir = Point2::new(a.cos(), a.sin());
                let len = SLOT_LENGTHS[slot] * rx * scale * rng.random_range(0.92..1.08);
                let root = 0.55 * rx;
                let half_width = SLOT_WIDTHS[slot] * rx;
                Finger {
                    slot,
                    base: Point2::new(root * dir.x, root * dir.y),
                    tip: Point2::new((root + len) * dir.x, (root + len) * dir.y),
                    half_width,
                    tip_radius: half_width * 1.15,
                }
            })
            .collect();

        // extents relative to the palm center
        let (c, s) = (hand_angle.cos(), hand_angle.sin());
        let ex = ((rx * c).powi(2) + (ry * s).powi(2)).sqrt();
        let ey = ((rx * s).powi(2) + (ry * c).powi(2)).sqrt();
        let mut ext = [-ex, -ey, ex, ey];
        for f in &fingers {
            let r = f.tip_radius.max(f.half_width);
            for p in [f.base, f.tip] {
                ext[0] = ext[0].min(p.x - r);
                ext[1] = ext[1].min(p.y - r);
                ext[2] = ext[2].max(p.x + r);
                ext[3] = ext[3].max(p.y + r);
            }
        }
        let margin = 4.0;
        let cx = rng.random_range((margin - ext[0])..(w - margin - ext[2]));
        let cy = rng.random_range((margin - ext[1])..(h - margin - ext[3]));
        let palm_center = Point2::new(cx, cy);
        for f in fingers.iter_mut() {
            f.base = Point2::new(f.base.x + cx, f.base.y + cy);
            f.tip = Point2::new(f.tip.x + cx, f.tip.y + cy);
        }
        let skin = [
            rng.random_range(185.0..225.0),
            rng.random_range(135.0..165.0),
            rng.random_range(105.0..135.0),
        ];
        Self {
            index,
            frame: cfg.image_size,
            seed: cfg.seed,
            palm_center,
            palm_axes: (rx, ry),
            hand_angle,
            skin,
            fingers,
            bbox_px: [ext[0] + cx, ext[1] + cy, ext[2] + cx, ext[3] + cy],
        }
    }

    pub fn file_name(&self) -> String {
        format!("images/{:05}.png", self.index)
    }

    pub fn record(&self) -> SampleRecord {
        let (w, h) = (self.frame.0 as f64, self.frame.1 as f64);
        let mut fingertips = [None; FINGER_COUNT];
        for f in &self.fingers {
            fingertips[f.slot] = Some([f.tip.x / w, f.tip.y / h]);
        }
        SampleRecord {
            image: self.file_name(),
            width: self.frame.0,
            height: self.frame.1,
            bbox: [
                self.bbox_px[0] / w,
                self.bbox_px[1] / h,
                self.bbox_px[2] / w,
                self.bbox_px[3] / h,
            ],
            fingertips,
        }
    }

    /// Background texture alone; also used to verify tip contrast.
    pub fn render_background(&self) -> RgbImage {
        let mut rng = scene_rng(self.seed, self.index, 1);
        let (w, h) = self.frame;
        let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(45.0..120.0));
        let (gw, gh) = (10usize, 8usize);
        let grid: Vec<[f64; 3]> = (0..gw * gh)
            .map(|_| std::array::from_fn(|_| rng.random_range(-28.0..28.0)))
            .collect();
        RgbImage::from_fn(w, h, |x, y| {
            let gx = x as f64 / w as f64 * (gw - 1) as f64;
            let gy = y as f64 / h as f64 * (gh - 1) as f64;
            let (ix, iy) = ((gx as usize).min(gw - 2), (gy as usize).min(gh - 2));
            let (tx, ty) = (gx - ix as f64, gy - iy as f64);
            let at = |i: usize, j: usize, c: usize| grid[j * gw + i][c];
            let noise = rng.random_range(-6.0..6.0);
            Rgb(std::array::from_fn(|c| {
                let low = at(ix, iy, c) * (1.0 - tx) * (1.0 - ty)
                    + at(ix + 1, iy, c) * tx * (1.0 - ty)
                    + at(ix, iy + 1, c) * (1.0 - tx) * ty
                    + at(ix + 1, iy + 1, c) * tx * ty;
                (base[c] + low + noise).clamp(0.0, BACKGROUND_MAX) as u8
            }))
        })
    }

    pub fn render(&self) -> RgbImage {
        let mut img = self.render_background();
        let (w, h) = self.frame;
        let x0 = self.bbox_px[0].floor().max(0.0) as u32;
        let y0 = self.bbox_px[1].floor().max(0.0) as u32;
        let x1 = (self.bbox_px[2].ceil() as u32).min(w);
        let y1 = (self.bbox_px[3].ceil() as u32).min(h);
        let (rx, ry) = self.palm_axes;
        let (c, s) = (self.hand_angle.cos(), self.hand_angle.sin());
        for y in y0..y1 {
            for x in x0..x1 {
                let p = Point2::new(x as f64 + 0.5, y as f64 + 0.5);
                let mut color: Option<[f64; 3]> = None;
                let dx = p.x - self.palm_center.x;
                let dy = p.y - self.palm_center.y;
                let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
                if (u / rx).powi(2) + (v / ry).powi(2) <= 1.0 {
                    color = Some(self.skin);
                }
                for f in &self.fingers {
                    if segment_distance(p, f.base, f.tip) <= f.half_width {
                        // slight shading along the finger keeps it below tip brightness
                        color = Some(self.skin.map(|v| v * 0.95));
                    }
                }
                for f in &self.fingers {
                    let d = p.distance(f.tip);
                    if d <= f.tip_radius {
                        let t = (d / f.tip_radius).powf(0.8);
                        let rim = TIP_COLORS[f.slot];
                        color = Some(std::array::from_fn(|k| 255.0 * (1.0 - t) + rim[k] as f64 * t));
                    }
                }
                if let Some(col) = color {
                    img.put_pixel(x, y, Rgb(col.map(|v| v.round().clamp(0.0, 255.0) as u8)));
                }
            }
        }
        img
    }
}

fn segment_distance(p: Point2<f64>, a: Point2<f64>, b: Point2<f64>) -> f64 {
    let (abx, aby) = (b.x - a.x, b.y - a.y);
    let len2 = abx * abx + aby * aby;
    let t = if len2 > 0.0 {
        (((p.x - a.x) * abx + (p.y - a.y) * aby) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    p.distance(Point2::new(a.x + t * abx, a.y + t * aby))
}

/// Manifest records for `cfg` without rasterizing any image.
pub fn synth_records(cfg: &SynthConfig) -> Result<Vec<SampleRecord>> {
    cfg.validate()?;
    Ok((0..cfg.count).map(|i| Scene::generate(cfg, i).record()).collect())
}

/// Renders `cfg.count` frames into `out_dir/images/` and writes
/// `out_dir/manifest.jsonl` plus a `synth_config.json` snapshot.
pub fn generate_synthetic(cfg: &SynthConfig, out_dir: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    let images = out_dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut records = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let scene = Scene::generate(cfg, i);
        let path = out_dir.join(scene.file_name());
        scene.render().save(&path).map_err(|source| Error::Image {
            path: path.clone(),
            source,
        })?;
        records.push(scene.record());
    }
    let manifest = out_dir.join("manifest.jsonl");
    write_manifest(&manifest, &records)?;
    let snapshot = out_dir.join("synth_config.json");
    fs::write(&snapshot, serde_json::to_string_pretty(cfg)?).map_err(|e| Error::io(&snapshot, e))?;
    Ok(manifest)
}
