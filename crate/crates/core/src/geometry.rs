//! Anchor grid, target encoding and coordinate transforms.
//!
//! Three coordinate spaces appear in the pipeline:
//!
//! * original frame pixels (e.g. 640x480 camera frames),
//! * the hand crop cut out of the frame by a bounding box,
//! * model-input pixels, the crop resized to `input_size x input_size`.
//!
//! Continuous pixel coordinates are used everywhere: pixel `i` covers
//! `[i, i + 1)`, so a square of side `size` spans `[0, size]`. The y axis
//! grows downward and angles increase from +x toward +y.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Number of fingertip slots: thumb, index, middle, ring, pinky.
pub const FINGER_COUNT: usize = 5;

/// Finger slot names in slot order.
pub const FINGER_NAMES: [&str; FINGER_COUNT] = ["thumb", "index", "middle", "ring", "pinky"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point2<T> {
    pub x: T,
    pub y: T,
}

impl<T: Scalar> Point2<T> {
    pub fn new(x: T, y: T) -> Self {
        Self { x, y }
    }

    pub fn distance(self, other: Self) -> T {
        self.distance_sq(other).sqrt()
    }

    pub fn distance_sq(self, other: Self) -> T {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    /// True when the point lies in the closed square `[0, size]^2`.
    pub fn in_square(self, size: T) -> bool {
        self.x >= T::zero() && self.x <= size && self.y >= T::zero() && self.y <= size
    }

    pub fn cast<U: Scalar>(self) -> Point2<U> {
        Point2::new(U::of(self.x.to_f64_lossy()), U::of(self.y.to_f64_lossy()))
    }
}

/// How anchors are distributed on the square boundary.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorLayout {
    /// Rays from the square center at equal angular steps, intersected with
    /// the boundary.
    #[default]
    Angular,
}

/// `N` fixed anchor points on the boundary of the model-input square.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorGrid<T> {
    size: usize,
    layout: AnchorLayout,
    points: Vec<Point2<T>>,
}

/// Exact cosine and sine for angles in degrees, with multiples of 90 exact.
pub(crate) fn cos_sin_deg<T: Scalar>(angle_deg: T) -> (T, T) {
    let quarter = angle_deg / T::of(90.0);
    if quarter == quarter.round() {
        let k = quarter.to_i64().map(|k| k.rem_euclid(4)).unwrap_or(0);
        let (c, s) = match k {
            0 => (1.0, 0.0),
            1 => (0.0, 1.0),
            2 => (-1.0, 0.0),
            _ => (0.0, -1.0),
        };
        return (T::of(c), T::of(s));
    }
    let rad = angle_deg.to_radians();
    (rad.cos(), rad.sin())
}

impl<T: Scalar> AnchorGrid<T> {
    /// Builds the default angular layout.
    pub fn new(count: usize, size: usize) -> Result<Self> {
        Self::with_layout(AnchorLayout::Angular, count, size)
    }

    pub fn with_layout(layout: AnchorLayout, count: usize, size: usize) -> Result<Self> {
        if count < 3 {
            return Err(Error::invalid(format!("anchor count must be >= 3, got {count}")));
        }
        if size < 2 {
            return Err(Error::invalid(format!("anchor grid size must be >= 2, got {size}")));
        }
        let points = match layout {
            AnchorLayout::Angular => (0..count)
                .map(|n| ray_exit(T::of(360.0 * n as f64 / count as f64), size))
                .collect(),
        };
        Ok(Self {
            size,
            layout,
            points,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn size_t(&self) -> T {
        T::of(self.size as f64)
    }

    pub fn count(&self) -> usize {
        self.points.len()
    }

    pub fn layout(&self) -> AnchorLayout {
        self.layout
    }

    pub fn points(&self) -> &[Point2<T>] {
        &self.points
    }

    pub fn point(&self, index: usize) -> Point2<T> {
        self.points[index]
    }

    /// Index and distance of the anchor closest to `p`; ties go to the lowest index.
    pub fn nearest(&self, p: Point2<T>) -> Result<(usize, T)> {
        if !p.is_finite() || !p.in_square(self.size_t()) {
            return Err(Error::invalid(format!(
                "point ({}, {}) outside [0, {}]^2",
                p.x, p.y, self.size
            )));
        }
        let mut best = 0;
        let mut best_d = p.distance_sq(self.points[0]);
        for (i, a) in self.points.iter().enumerate().skip(1) {
            let d = p.distance_sq(*a);
            if d < best_d {
                best = i;
                best_d = d;
            }
        }
        Ok((best, best_d.sqrt()))
    }

    /// Encodes model-space fingertips into per-finger anchor classes and offsets.
    pub fn encode(&self, tips: &FingertipSet<T>) -> Result<EncodedTarget<T>> {
        let size = self.size_t();
        let mut target = EncodedTarget::absent(self.count());
        for (i, slot) in tips.slots.iter().enumerate() {
            if let Some(p) = slot {
                let (j, _) = self.nearest(*p)?;
                let a = self.points[j];
                target.anchor_class[i] = j;
                target.offset[i] = [(p.x - a.x) / size, (p.y - a.y) / size];
                target.mask[i] = true;
            }
        }
        Ok(target)
    }

    /// Decodes one sample's head outputs.
    ///
    /// `class_scores` is row-major `5 x (N + 1)`, `offsets` is `5 x 2`.
    pub fn decode(&self, class_scores: &[T], offsets: &[T]) -> Result<FingertipSet<T>> {
        let classes = self.count() + 1;
        if class_scores.len() != FINGER_COUNT * classes {
            return Err(Error::invalid(format!(
                "expected {} class scores, got {}",
                FINGER_COUNT * classes,
                class_scores.len()
            )));
        }
        if offsets.len() != FINGER_COUNT * 2 {
            return Err(Error::invalid(format!(
                "expected {} offsets, got {}",
                FINGER_COUNT * 2,
                offsets.len()
            )));
        }
        let size = self.size_t();
        let mut out = FingertipSet::empty();
        for i in 0..FINGER_COUNT {
            let row = &class_scores[i * classes..(i + 1) * classes];
            let j = argmax(row)?;
            if j == self.count() {
                continue;
            }
            let a = self.points[j];
            let x = a.x + offsets[2 * i] * size;
            let y = a.y + offsets[2 * i + 1] * size;
            out.slots[i] = Some(Point2::new(
                x.max(T::zero()).min(size),
                y.max(T::zero()).min(size),
            ));
        }
        Ok(out)
    }
}

/// Intersection of the center ray at `angle_deg` with the square boundary.
fn ray_exit<T: Scalar>(angle_deg: T, size: usize) -> Point2<T> {
    let s = T::of(size as f64);
    let half = s / T::of(2.0);
    let (mut c, mut sn) = cos_sin_deg(angle_deg);
    let tiny = T::of(1e-12);
    if c.abs() < tiny {
        c = T::zero();
    }
    if sn.abs() < tiny {
        sn = T::zero();
    }
    let snap = |v: T| {
        let tol = s * T::of(1e-9);
        if v.abs() <= tol {
            T::zero()
        } else if (v - s).abs() <= tol {
            s
        } else {
            v
        }
    };
    if c.abs() >= sn.abs() {
        let x = if c > T::zero() { s } else { T::zero() };
        let y = half + half * sn / c.abs();
        Point2::new(x, snap(y))
    } else {
        let y = if sn > T::zero() { s } else { T::zero() };
        let x = half + half * c / sn.abs();
        Point2::new(snap(x), y)
    }
}

/// Index of the largest element, lowest index on ties.
pub fn argmax<T: Scalar>(row: &[T]) -> Result<usize> {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::invalid("non-finite class score"));
        }
        if *v > row[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Five ordered fingertip slots; `None` marks an absent finger.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct FingertipSet<T> {
    pub slots: [Option<Point2<T>>; FINGER_COUNT],
}

impl<T: Scalar> FingertipSet<T> {
    pub fn empty() -> Self {
        Self {
            slots: [None; FINGER_COUNT],
        }
    }

    pub fn present_count(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }

    pub fn map(&self, mut f: impl FnMut(Point2<T>) -> Option<Point2<T>>) -> Self {
        let mut out = Self::empty();
        for (o, s) in out.slots.iter_mut().zip(&self.slots) {
            *o = s.and_then(&mut f);
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> FingertipSet<U> {
        let mut out = FingertipSet::empty();
        for (o, s) in out.slots.iter_mut().zip(&self.slots) {
            *o = s.map(|p| p.cast());
        }
        out
    }
}

/// Training target for one sample.
///
/// Class `N` (one past the last anchor) marks an absent finger. Offsets are
/// `(tip - anchor) / size`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedTarget<T> {
    pub anchor_class: [usize; FINGER_COUNT],
    pub offset: [[T; 2]; FINGER_COUNT],
    pub mask: [bool; FINGER_COUNT],
}

impl<T: Scalar> EncodedTarget<T> {
    pub fn absent(anchor_count: usize) -> Self {
        Self {
            anchor_class: [anchor_count; FINGER_COUNT],
            offset: [[T::zero(); 2]; FINGER_COUNT],
            mask: [false; FINGER_COUNT],
        }
    }

    /// One-hot class score rows, `5 x (N + 1)` row-major.
    pub fn one_hot_scores(&self, anchor_count: usize) -> Vec<T> {
        let classes = anchor_count + 1;
        let mut out = vec![T::zero(); FINGER_COUNT * classes];
        for (i, &c) in self.anchor_class.iter().enumerate() {
            out[i * classes + c] = T::one();
        }
        out
    }

    pub fn flat_offsets(&self) -> Vec<T> {
        self.offset.iter().flat_map(|o| o.iter().copied()).collect()
    }

    pub fn cast<U: Scalar>(&self) -> EncodedTarget<U> {
        EncodedTarget {
            anchor_class: self.anchor_class,
            offset: self.offset.map(|[x, y]| [U::of(x.to_f64_lossy()), U::of(y.to_f64_lossy())]),
            mask: self.mask,
        }
    }

    /// Checks the encoding invariants against a grid.
    pub fn validate(&self, grid: &AnchorGrid<T>) -> Result<()> {
        let n = grid.count();
        for i in 0..FINGER_COUNT {
            let c = self.anchor_class[i];
            if c > n {
                return Err(Error::invalid(format!("finger {i}: class {c} > {n}")));
            }
            if self.mask[i] != (c < n) {
                return Err(Error::invalid(format!("finger {i}: mask disagrees with class")));
            }
            let [dx, dy] = self.offset[i];
            if dx.abs() > T::one() || dy.abs() > T::one() {
                return Err(Error::invalid(format!("finger {i}: offset out of [-1, 1]")));
            }
            if self.mask[i] {
                let a = grid.point(c);
                let p = Point2::new(a.x + dx * grid.size_t(), a.y + dy * grid.size_t());
                let tol = grid.size_t() * T::epsilon() * T::of(8.0);
                let s = grid.size_t();
                if p.x < -tol || p.y < -tol || p.x > s + tol || p.y > s + tol {
                    return Err(Error::invalid(format!("finger {i}: decoded point off the square")));
                }
            }
        }
        Ok(())
    }
}

/// Axis-aligned box `[x_min, y_min, x_max, y_max]`, normalized or pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox<T> {
    pub x_min: T,
    pub y_min: T,
    pub x_max: T,
    pub y_max: T,
}

impl<T: Scalar> BoundingBox<T> {
    pub fn new(x_min: T, y_min: T, x_max: T, y_max: T) -> Result<Self> {
        let b = Self {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn from_array(v: [T; 4]) -> Result<Self> {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn to_array(self) -> [T; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.to_array().iter().all(|v| v.is_finite());
        if !finite || !(self.x_min < self.x_max) || !(self.y_min < self.y_max) {
            return Err(Error::invalid(format!(
                "degenerate box [{}, {}, {}, {}]",
                self.x_min, self.y_min, self.x_max, self.y_max
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> T {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> T {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> T {
        self.width() * self.height()
    }

    /// Normalized box whose corners lie in `[0, 1]`.
    pub fn is_normalized(&self) -> bool {
        self.to_array()
            .iter()
            .all(|v| *v >= T::zero() && *v <= T::one())
    }

    pub fn contains(&self, p: Point2<T>) -> bool {
        p.x >= self.x_min && p.x <= self.x_max && p.y >= self.y_min && p.y <= self.y_max
    }
}

/// Invertible map between original-frame pixels and model-input pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropTransform<T> {
    pub origin: Point2<T>,
    pub crop_size: (T, T),
    pub input_size: usize,
}

impl<T: Scalar> CropTransform<T> {
    pub fn new(origin: Point2<T>, crop_size: (T, T), input_size: usize) -> Result<Self> {
        if !(crop_size.0 > T::zero() && crop_size.1 > T::zero()) || input_size == 0 {
            return Err(Error::invalid("crop size and input size must be positive"));
        }
        Ok(Self {
            origin,
            crop_size,
            input_size,
        })
    }

    /// Crop for a normalized bbox in a `frame = (W, H)` image.
    ///
    /// Each side is pushed outward by `pad_fraction` times the box side
    /// length, then the result is intersected with the frame.
    pub fn from_bbox(
        bbox: &BoundingBox<T>,
        frame: (u32, u32),
        input_size: usize,
        pad_fraction: T,
    ) -> Result<Self> {
        bbox.validate()?;
        if !bbox.is_normalized() {
            return Err(Error::invalid("bbox is not normalized to [0, 1]"));
        }
        if !(pad_fraction >= T::zero()) {
            return Err(Error::invalid("pad_fraction must be >= 0"));
        }
        let (w, h) = (T::of(frame.0 as f64), T::of(frame.1 as f64));
        let x0 = bbox.x_min * w;
        let x1 = bbox.x_max * w;
        let y0 = bbox.y_min * h;
        let y1 = bbox.y_max * h;
        let px = (x1 - x0) * pad_fraction;
        let py = (y1 - y0) * pad_fraction;
        let x0 = (x0 - px).max(T::zero());
        let y0 = (y0 - py).max(T::zero());
        let x1 = (x1 + px).min(w);
        let y1 = (y1 + py).min(h);
        if !(x1 > x0 && y1 > y0) {
            return Err(Error::invalid("crop has zero area after frame intersection"));
        }
        Self::new(Point2::new(x0, y0), (x1 - x0, y1 - y0), input_size)
    }

    fn scale(&self) -> (T, T) {
        let s = T::of(self.input_size as f64);
        (s / self.crop_size.0, s / self.crop_size.1)
    }

    pub fn to_model_space(&self, p: Point2<T>) -> Point2<T> {
        let (sx, sy) = self.scale();
        Point2::new((p.x - self.origin.x) * sx, (p.y - self.origin.y) * sy)
    }

    pub fn from_model_space(&self, p: Point2<T>) -> Point2<T> {
        let s = T::of(self.input_size as f64);
        Point2::new(
            p.x * self.crop_size.0 / s + self.origin.x,
            p.y * self.crop_size.1 / s + self.origin.y,
        )
    }

    /// Frame pixels per model pixel along x and y.
    pub fn frame_pixels_per_model_pixel(&self) -> (T, T) {
        let (sx, sy) = self.scale();
        (sx.recip(), sy.recip())
    }
}

/// Rotates one point about `center`; positive angles turn +x toward +y.
pub fn rotate_point<T: Scalar>(p: Point2<T>, angle_deg: T, center: Point2<T>) -> Point2<T> {
    let (c, s) = cos_sin_deg(angle_deg);
    let dx = p.x - center.x;
    let dy = p.y - center.y;
    Point2::new(center.x + c * dx - s * dy, center.y + s * dx + c * dy)
}

/// Rotates every present tip; tips leaving `[0, size]^2` become absent.
pub fn rotate_points<T: Scalar>(
    tips: &FingertipSet<T>,
    angle_deg: T,
    center: Point2<T>,
    size: usize,
) -> FingertipSet<T> {
    let s = T::of(size as f64);
    // rounding slack so exact quarter turns never drop boundary points
    let tol = s * T::epsilon() * T::of(16.0);
    tips.map(|p| {
        let q = rotate_point(p, angle_deg, center);
        let inside = q.x >= -tol && q.y >= -tol && q.x <= s + tol && q.y <= s + tol;
        inside.then(|| Point2::new(q.x.max(T::zero()).min(s), q.y.max(T::zero()).min(s)))
    })
}
