//! Crop, resize and keypoint-consistent augmentation.
//!
//! Every output pixel is resampled once from the original frame through the
//! composed inverse map (rotation, flips, crop-resize), so pixels and
//! keypoints always see exactly the same geometry.

use image::RgbImage;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::manifest::SampleRecord;
use crate::error::{Error, Result};
use crate::geometry::{rotate_point, rotate_points, AnchorGrid, CropTransform, EncodedTarget, FingertipSet, Point2};
use crate::nn::Tensor4;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    pub enabled: bool,
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    pub rotation_max_deg: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            hflip_prob: 0.5,
            vflip_prob: 0.5,
            rotation_max_deg: 180.0,
        }
    }
}

impl AugmentationConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("hflip_prob", self.hflip_prob), ("vflip_prob", self.vflip_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if !(self.rotation_max_deg >= 0.0 && self.rotation_max_deg.is_finite()) {
            return Err(Error::invalid("rotation_max_deg must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Augmentation actually drawn for one sample.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AppliedAugmentation {
    pub hflip: bool,
    pub vflip: bool,
    pub rotation_deg: f64,
}

impl AppliedAugmentation {
    pub fn draw<R: Rng>(cfg: &AugmentationConfig, rng: &mut R) -> Self {
        if !cfg.enabled {
            return Self::default();
        }
        let hflip = rng.random::<f64>() < cfg.hflip_prob;
        let vflip = rng.random::<f64>() < cfg.vflip_prob;
        let r = cfg.rotation_max_deg;
        let rotation_deg = if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
        Self {
            hflip,
            vflip,
            rotation_deg,
        }
    }

    /// Applies flips then rotation to a model-space point.
    pub fn forward_point(&self, p: Point2<f64>, size: usize) -> Point2<f64> {
        let s = size as f64;
        let mut q = p;
        if self.hflip {
            q.x = s - q.x;
        }
        if self.vflip {
            q.y = s - q.y;
        }
        rotate_point(q, self.rotation_deg, Point2::new(s / 2.0, s / 2.0))
    }

    /// Undoes [`Self::forward_point`].
    pub fn inverse_point(&self, p: Point2<f64>, size: usize) -> Point2<f64> {
        let s = size as f64;
        let mut q = rotate_point(p, -self.rotation_deg, Point2::new(s / 2.0, s / 2.0));
        if self.vflip {
            q.y = s - q.y;
        }
        if self.hflip {
            q.x = s - q.x;
        }
        q
    }

    /// Keypoint side: flips then rotation; tips rotated off the square become absent.
    pub fn apply_to_tips(&self, tips: &FingertipSet<f64>, size: usize) -> FingertipSet<f64> {
        let s = size as f64;
        let flipped = tips.map(|p| {
            Some(Point2::new(
                if self.hflip { s - p.x } else { p.x },
                if self.vflip { s - p.y } else { p.y },
            ))
        });
        rotate_points(&flipped, self.rotation_deg, Point2::new(s / 2.0, s / 2.0), size)
    }
}

/// The part of a training sample that does not depend on augmentation.
///
/// Holds only the frame region the crop can touch, which keeps caches small.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pixels: RgbImage,
    /// Frame coordinates of `pixels`' top-left corner.
    offset: (u32, u32),
    frame: (u32, u32),
    pub transform: CropTransform<f64>,
    /// Ground truth in model space, clamped onto the square.
    pub tips: FingertipSet<f64>,
}

pub fn prepare_sample(
    record: &SampleRecord,
    image: &RgbImage,
    input_size: usize,
    pad_fraction: f64,
) -> Result<PreparedSample> {
    if image.dimensions() != record.frame() {
        return Err(Error::invalid(format!(
            "{}: image is {:?}, manifest says {:?}",
            record.image,
            image.dimensions(),
            record.frame()
        )));
    }
    let transform = CropTransform::from_bbox(&record.bbox()?, record.frame(), input_size, pad_fraction)?;
    prepare_with_transform(record, image, transform)
}

/// Like [`prepare_sample`] with an explicit crop (e.g. from a predicted box).
pub fn prepare_with_transform(
    record: &SampleRecord,
    image: &RgbImage,
    transform: CropTransform<f64>,
) -> Result<PreparedSample> {
    let (w, h) = image.dimensions();
    let x0 = (transform.origin.x.floor() as i64 - 1).clamp(0, w as i64 - 1) as u32;
    let y0 = (transform.origin.y.floor() as i64 - 1).clamp(0, h as i64 - 1) as u32;
    let x1 = ((transform.origin.x + transform.crop_size.0).ceil() as i64 + 1).clamp(x0 as i64 + 1, w as i64) as u32;
    let y1 = ((transform.origin.y + transform.crop_size.1).ceil() as i64 + 1).clamp(y0 as i64 + 1, h as i64) as u32;
    let pixels = image::imageops::crop_imm(image, x0, y0, x1 - x0, y1 - y0).to_image();
    let s = transform.input_size as f64;
    let tips = record
        .fingertips_px()
        .map(|p| {
            let m = transform.to_model_space(p);
            Some(Point2::new(m.x.clamp(0.0, s), m.y.clamp(0.0, s)))
        });
    Ok(PreparedSample {
        pixels,
        offset: (x0, y0),
        frame: (w, h),
        transform,
        tips,
    })
}

/// Model input plus its encoded target.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample<T> {
    /// `[3, S, S]` planar RGB in `[0, 1]`.
    pub input: Vec<T>,
    pub target: EncodedTarget<T>,
    /// Model-space keypoints after augmentation.
    pub tips: FingertipSet<f64>,
    pub applied: AppliedAugmentation,
}

impl PreparedSample {
    pub fn input_size(&self) -> usize {
        self.transform.input_size
    }

    /// Bilinear sample in frame coordinates (pixel centers at +0.5), edge clamped.
    fn sample(&self, fx: f64, fy: f64) -> [f64; 3] {
        let (fw, fh) = self.frame;
        let x = (fx - 0.5).clamp(0.0, fw as f64 - 1.0) - self.offset.0 as f64;
        let y = (fy - 0.5).clamp(0.0, fh as f64 - 1.0) - self.offset.1 as f64;
        let (pw, ph) = self.pixels.dimensions();
        let x = x.clamp(0.0, pw as f64 - 1.0);
        let y = y.clamp(0.0, ph as f64 - 1.0);
        let (x0, y0) = (x.floor() as u32, y.floor() as u32);
        let (x1, y1) = ((x0 + 1).min(pw - 1), (y0 + 1).min(ph - 1));
        let (tx, ty) = (x - x0 as f64, y - y0 as f64);
        let px = |xx, yy| self.pixels.get_pixel(xx, yy).0;
        let (a, b, c, d) = (px(x0, y0), px(x1, y0), px(x0, y1), px(x1, y1));
        let mut out = [0.0; 3];
        for ch in 0..3 {
            let top = a[ch] as f64 * (1.0 - tx) + b[ch] as f64 * tx;
            let bot = c[ch] as f64 * (1.0 - tx) + d[ch] as f64 * tx;
            out[ch] = top * (1.0 - ty) + bot * ty;
        }
        out
    }

    /// Renders the model input under `aug`; pixels mapped from outside the crop are black.
    pub fn render<T: Scalar>(&self, aug: &AppliedAugmentation) -> Vec<T> {
        let s = self.input_size();
        let sf = s as f64;
        let plane = s * s;
        let mut out = vec![T::zero(); 3 * plane];
        let scale = T::of(1.0 / 255.0);
        for v in 0..s {
            for u in 0..s {
                let q = Point2::new(u as f64 + 0.5, v as f64 + 0.5);
                let m = aug.inverse_point(q, s);
                if m.x < 0.0 || m.y < 0.0 || m.x > sf || m.y > sf {
                    continue;
                }
                let f = self.transform.from_model_space(m);
                let rgb = self.sample(f.x, f.y);
                for ch in 0..3 {
                    out[ch * plane + v * s + u] = T::of(rgb[ch]) * scale;
                }
            }
        }
        out
    }

    pub fn augment<T: Scalar, R: Rng>(
        &self,
        grid: &AnchorGrid<T>,
        cfg: &AugmentationConfig,
        rng: &mut R,
    ) -> Result<TrainingSample<T>> {
        let applied = AppliedAugmentation::draw(cfg, rng);
        self.with_augmentation(grid, applied)
    }

    pub fn with_augmentation<T: Scalar>(
        &self,
        grid: &AnchorGrid<T>,
        applied: AppliedAugmentation,
    ) -> Result<TrainingSample<T>> {
        if grid.size() != self.input_size() {
            return Err(Error::invalid("anchor grid size differs from the crop input size"));
        }
        let tips = applied.apply_to_tips(&self.tips, self.input_size());
        let target = grid.encode(&tips.cast())?;
        Ok(TrainingSample {
            input: self.render(&applied),
            target,
            tips,
            applied,
        })
    }
}

/// Crop, resize, augment and encode one record.
pub fn make_training_sample<T: Scalar, R: Rng>(
    record: &SampleRecord,
    image: &RgbImage,
    grid: &AnchorGrid<T>,
    aug: &AugmentationConfig,
    rng: &mut R,
) -> Result<TrainingSample<T>> {
    prepare_sample(record, image, grid.size(), 0.0)?.augment(grid, aug, rng)
}

/// Stacks per-sample inputs into an NCHW batch.
pub fn stack_inputs<T: Scalar>(inputs: &[&[T]], size: usize) -> Result<Tensor4<T>> {
    let mut data = Vec::with_capacity(inputs.len() * 3 * size * size);
    for i in inputs {
        data.extend_from_slice(i);
    }
    Tensor4::from_vec([inputs.len(), 3, size, size], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gradient_image(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| Rgb([(x % 256) as u8, (y % 256) as u8, ((x * 7 + y * 3) % 256) as u8]))
    }

    fn record() -> SampleRecord {
        SampleRecord {
            image: "x.png".into(),
            width: 64,
            height: 48,
            bbox: [0.25, 0.25, 0.75, 0.75],
            fingertips: [Some([0.3, 0.3]), None, Some([0.7, 0.5]), None, Some([0.5, 0.74])],
        }
    }

    #[test]
    fn disabled_augmentation_is_pure_crop_mapping() {
        let rec = record();
        let img = gradient_image(64, 48);
        let grid = AnchorGrid::<f64>::new(8, 32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = make_training_sample(&rec, &img, &grid, &AugmentationConfig::disabled(), &mut rng).unwrap();
        let t = CropTransform::from_bbox(&rec.bbox().unwrap(), (64, 48), 32, 0.0).unwrap();
        for (got, want) in s.tips.slots.iter().zip(rec.fingertips_px().slots) {
            match (got, want) {
                (Some(g), Some(w)) => {
                    let w = t.to_model_space(w);
                    assert!(g.distance(w) < 1e-9);
                }
                (None, None) => {}
                _ => panic!("presence changed"),
            }
        }
        assert_eq!(s.target, grid.encode(&s.tips).unwrap());
        assert_eq!(s.input.len(), 3 * 32 * 32);
    }

    #[test]
    fn identity_crop_copies_pixels() {
        let img = gradient_image(32, 32);
        let rec = SampleRecord {
            width: 32,
            height: 32,
            bbox: [0.0, 0.0, 1.0, 1.0],
            ..record()
        };
        let prep = prepare_sample(&rec, &img, 32, 0.0).unwrap();
        let input: Vec<f64> = prep.render(&AppliedAugmentation::default());
        for y in 0..32 {
            for x in 0..32 {
                let p = img.get_pixel(x, y).0;
                for ch in 0..3 {
                    let v = input[ch * 1024 + (y * 32 + x) as usize];
                    assert!((v - p[ch] as f64 / 255.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn horizontal_flip_mirrors_pixels_and_tips() {
        let img = gradient_image(64, 48);
        let rec = record();
        let prep = prepare_sample(&rec, &img, 32, 0.0).unwrap();
        let grid = AnchorGrid::<f64>::new(8, 32).unwrap();
        let plain = prep.with_augmentation(&grid, AppliedAugmentation::default()).unwrap();
        let flip = AppliedAugmentation {
            hflip: true,
            ..Default::default()
        };
        let flipped = prep.with_augmentation(&grid, flip).unwrap();
        for (a, b) in plain.tips.slots.iter().zip(&flipped.tips.slots) {
            if let (Some(a), Some(b)) = (a, b) {
                assert!((b.x - (32.0 - a.x)).abs() < 1e-12 && (b.y - a.y).abs() < 1e-12);
            }
        }
        for ch in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    let a = plain.input[ch * 1024 + y * 32 + x];
                    let b = flipped.input[ch * 1024 + y * 32 + (31 - x)];
                    assert!((a - b).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn quarter_turn_rotates_pixels_exactly() {
        let img = gradient_image(64, 48);
        let prep = prepare_sample(&record(), &img, 32, 0.0).unwrap();
        let plain: Vec<f64> = prep.render(&AppliedAugmentation::default());
        let rot: Vec<f64> = prep.render(&AppliedAugmentation {
            rotation_deg: 90.0,
            ..Default::default()
        });
        // (x, y) -> (32 - y, x) about the center, i.e. pixel (u, v) -> (31 - v, u)
        for v in 0..32 {
            for u in 0..32 {
                let a = plain[v * 32 + u];
                let b = rot[u * 32 + (31 - v)];
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn fixed_seed_is_byte_identical() {
        let img = gradient_image(64, 48);
        let grid = AnchorGrid::<f32>::new(8, 32).unwrap();
        let cfg = AugmentationConfig::default();
        let a = make_training_sample(&record(), &img, &grid, &cfg, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let b = make_training_sample(&record(), &img, &grid, &cfg, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn augmentation_consistency() {
        let img = gradient_image(64, 48);
        let prep = prepare_sample(&record(), &img, 32, 0.0).unwrap();
        let grid = AnchorGrid::<f64>::new(8, 32).unwrap();
        let cfg = AugmentationConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let s = prep.augment(&grid, &cfg, &mut rng).unwrap();
            s.target.validate(&grid).unwrap();
            for (out, orig) in s.tips.slots.iter().zip(&prep.tips.slots) {
                let Some(orig) = orig else {
                    assert!(out.is_none());
                    continue;
                };
                let expect = s.applied.forward_point(*orig, 32);
                match out {
                    Some(p) => assert!(p.distance(expect) < 1e-6),
                    None => assert!(!expect.in_square(32.0)),
                }
                let back = s.applied.inverse_point(expect, 32);
                assert!(back.distance(*orig) < 1e-9);
            }
        }
    }

    #[test]
    fn frame_mismatch_and_bad_bbox() {
        let img = gradient_image(32, 32);
        let grid = AnchorGrid::<f64>::new(8, 32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(make_training_sample(&record(), &img, &grid, &AugmentationConfig::disabled(), &mut rng).is_err());
        let mut bad = record();
        bad.bbox = [0.5, 0.2, 0.5, 0.6];
        let img = gradient_image(64, 48);
        assert!(make_training_sample(&bad, &img, &grid, &AugmentationConfig::disabled(), &mut rng).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(AugmentationConfig::default().validate().is_ok());
        let bad = AugmentationConfig {
            hflip_prob: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
