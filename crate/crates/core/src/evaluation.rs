//! Matching, detection metrics, pixel error, CDE, IoU and evaluation reports.
//!
//! All distances are in original-frame pixels.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{load_rgb, prepare_with_transform, stack_inputs, AppliedAugmentation, Manifest, PreparedSample};
use crate::error::{Error, Result};
use crate::geometry::{AnchorGrid, BoundingBox, CropTransform, FingertipSet, Point2, FINGER_COUNT};
use crate::network::{load_checkpoint, load_checkpoint_for_grid, FingertipNet};
use crate::scalar::Scalar;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// Distances of the true-positive pairs.
    pub per_finger_errors: Vec<f64>,
}

impl MatchResult {
    pub fn merge(&mut self, other: &MatchResult) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.per_finger_errors.extend_from_slice(&other.per_finger_errors);
    }
}

/// Slot-wise matching under the radius-`delta` rule.
pub fn match_fingertips(pred: &FingertipSet<f64>, gt: &FingertipSet<f64>, delta: f64) -> MatchResult {
    let mut r = MatchResult::default();
    for i in 0..FINGER_COUNT {
        match (pred.slots[i], gt.slots[i]) {
            (Some(p), Some(g)) => {
                let d = p.distance(g);
                if d <= delta {
                    r.tp += 1;
                    r.per_finger_errors.push(d);
                } else {
                    r.fn_ += 1;
                }
            }
            (None, Some(_)) => r.fn_ += 1,
            (Some(_), None) => r.fp += 1,
            (None, None) => {}
        }
    }
    r
}

/// Precision, recall and F1; a zero denominator gives 0.
pub fn precision_recall_f1(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let ratio = |num: f64, den: f64| if den > 0.0 { num / den } else { 0.0 };
    let tp_f = tp as f64;
    let p = ratio(tp_f, (tp + fp) as f64);
    let r = ratio(tp_f, (tp + fn_) as f64);
    (p, r, ratio(2.0 * p * r, p + r))
}

/// Mean of every recorded pair error, or `None` when there are no pairs.
///
/// Pass results matched with `delta = f64::INFINITY` so that every
/// slot where both sides are present contributes.
pub fn average_pixel_error(results: &[MatchResult]) -> Option<f64> {
    let (sum, n) = results
        .iter()
        .flat_map(|r| &r.per_finger_errors)
        .fold((0.0, 0usize), |(s, n), e| (s + e, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Fraction of images whose average error is at most each threshold.
pub fn cde_curve(per_image_errors: &[f64], thresholds: &[f64]) -> Result<Vec<(f64, f64)>> {
    if per_image_errors.is_empty() {
        return Err(Error::invalid("CDE needs at least one image error"));
    }
    if thresholds.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::invalid("CDE thresholds must be sorted ascending"));
    }
    let n = per_image_errors.len() as f64;
    Ok(thresholds
        .iter()
        .map(|&t| (t, per_image_errors.iter().filter(|e| **e <= t).count() as f64 / n))
        .collect())
}

/// Whole-pixel thresholds from 0 up to the first one covering the largest error.
pub fn default_cde_thresholds(per_image_errors: &[f64]) -> Vec<f64> {
    let max = per_image_errors.iter().copied().fold(0.0, f64::max);
    (0..=max.ceil() as usize).map(|t| t as f64).collect()
}

/// Intersection over union; degenerate boxes are rejected.
pub fn iou(a: &BoundingBox<f64>, b: &BoundingBox<f64>) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let w = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let h = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = w * h;
    Ok(inter / (a.area() + b.area() - inter))
}

/// Produces original-frame fingertip predictions for prepared crops.
pub trait Predictor {
    fn input_size(&self) -> usize;
    fn predict(&mut self, batch: &[&PreparedSample]) -> Result<Vec<FingertipSet<f64>>>;
}

/// Runs a network on un-augmented crops and maps decoded points back to the frame.
pub struct ModelPredictor<T: Scalar> {
    model: FingertipNet<T>,
    grid: AnchorGrid<T>,
}

impl<T: Scalar> ModelPredictor<T> {
    pub fn new(model: FingertipNet<T>) -> Result<Self> {
        let grid = model.config().anchor_grid()?;
        Ok(Self { model, grid })
    }

    pub fn model(&self) -> &FingertipNet<T> {
        &self.model
    }
}

impl<T: Scalar> Predictor for ModelPredictor<T> {
    fn input_size(&self) -> usize {
        self.grid.size()
    }

    fn predict(&mut self, batch: &[&PreparedSample]) -> Result<Vec<FingertipSet<f64>>> {
        let size = self.input_size();
        let identity = AppliedAugmentation::default();
        let inputs: Vec<Vec<T>> = batch.iter().map(|s| s.render(&identity)).collect();
        let refs: Vec<&[T]> = inputs.iter().map(|v| v.as_slice()).collect();
        let out = self.model.forward(&stack_inputs(&refs, size)?)?;
        batch
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let tips = self.grid.decode(out.sample_scores(k), out.sample_offsets(k))?;
                Ok(tips.cast::<f64>().map(|p| Some(s.transform.from_model_space(p))))
            })
            .collect()
    }
}

/// Stand-in model that outputs the encoded ground truth of each crop,
/// optionally displaced by a fixed frame-pixel shift.
pub struct OraclePredictor {
    grid: AnchorGrid<f64>,
    shift: (f64, f64),
}

impl OraclePredictor {
    pub fn new(anchor_count: usize, input_size: usize) -> Result<Self> {
        Ok(Self {
            grid: AnchorGrid::new(anchor_count, input_size)?,
            shift: (0.0, 0.0),
        })
    }

    pub fn with_shift(mut self, dx: f64, dy: f64) -> Self {
        self.shift = (dx, dy);
        self
    }
}

impl Predictor for OraclePredictor {
    fn input_size(&self) -> usize {
        self.grid.size()
    }

    fn predict(&mut self, batch: &[&PreparedSample]) -> Result<Vec<FingertipSet<f64>>> {
        batch
            .iter()
            .map(|s| {
                let target = self.grid.encode(&s.tips)?;
                let scores = target.one_hot_scores(self.grid.count());
                let tips = self.grid.decode(&scores, &target.flat_offsets())?;
                Ok(tips.map(|p| {
                    let f = s.transform.from_model_space(p);
                    Some(Point2::new(f.x + self.shift.0, f.y + self.shift.1))
                }))
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub deltas: Vec<f64>,
    /// Predicted hand boxes keyed by the manifest `image` field; ground truth when `None`.
    pub boxes: Option<HashMap<String, [f64; 4]>>,
    pub pad_fraction: f64,
    pub batch_size: usize,
    /// CDE thresholds; derived from the observed errors when `None`.
    pub cde_thresholds: Option<Vec<f64>>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            deltas: vec![10.0, 15.0],
            boxes: None,
            pad_fraction: 0.0,
            batch_size: 16,
            cde_thresholds: None,
        }
    }
}

impl EvalOptions {
    pub fn validate(&self) -> Result<()> {
        if self.deltas.is_empty() {
            return Err(Error::invalid("at least one delta is required"));
        }
        if let Some(d) = self.deltas.iter().find(|d| !(d.is_finite() && **d > 0.0)) {
            return Err(Error::invalid(format!("delta must be positive, got {d}")));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be > 0"));
        }
        if !(self.pad_fraction.is_finite() && self.pad_fraction >= 0.0) {
            return Err(Error::invalid("pad_fraction must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMetrics {
    pub delta: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub checkpoint: Option<String>,
    pub checkpoint_sha256: Option<String>,
    pub manifest: String,
    pub deltas: Vec<f64>,
    pub boxes: Option<String>,
    pub tool_version: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub images: usize,
    /// 0 when no pair was matched; see `avg_pixel_error_defined`.
    pub avg_pixel_error: f64,
    pub avg_pixel_error_defined: bool,
    pub per_threshold: Vec<ThresholdMetrics>,
    /// `(threshold px, fraction of images)` over images with at least one matched pair.
    pub cde: Vec<(f64, f64)>,
    pub actual_fingertips: usize,
    pub detected_fingertips: usize,
    pub mean_iou: Option<f64>,
    pub metadata: RunMetadata,
}

impl MetricsReport {
    pub fn threshold(&self, delta: f64) -> Option<&ThresholdMetrics> {
        self.per_threshold.iter().find(|t| t.delta == delta)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageResult {
    pub image: String,
    pub prediction: FingertipSet<f64>,
    pub ground_truth: FingertipSet<f64>,
    /// Mean error over slots where both sides are present.
    pub average_error: Option<f64>,
    pub iou: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub images: Vec<ImageResult>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BoxLine {
    image: String,
    bbox: [f64; 4],
}

/// Reads a JSON Lines sidecar of `{"image": ..., "bbox": [x_min, y_min, x_max, y_max]}`.
pub fn load_box_sidecar(path: &Path) -> Result<HashMap<String, [f64; 4]>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = HashMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| Error::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let b: BoxLine = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        BoundingBox::from_array(b.bbox).map_err(|e| bad(e.to_string()))?;
        if out.insert(b.image.clone(), b.bbox).is_some() {
            return Err(bad(format!("duplicate entry for {}", b.image)));
        }
    }
    Ok(out)
}

pub fn write_box_sidecar(path: &Path, boxes: &[(String, [f64; 4])]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for (image, bbox) in boxes {
        let line = serde_json::json!({ "image": image, "bbox": bbox });
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Evaluates `predictor` over every manifest record.
pub fn evaluate_predictor<P: Predictor>(
    predictor: &mut P,
    manifest: &Manifest,
    opts: &EvalOptions,
) -> Result<Evaluation> {
    opts.validate()?;
    if manifest.records.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty manifest"));
    }
    let size = predictor.input_size();
    let mut counts = vec![MatchResult::default(); opts.deltas.len()];
    let mut all_pairs = Vec::with_capacity(manifest.records.len());
    let mut images = Vec::with_capacity(manifest.records.len());
    let (mut actual, mut detected) = (0, 0);
    let mut ious = Vec::new();

    for chunk in manifest.records.chunks(opts.batch_size) {
        let mut prepared = Vec::with_capacity(chunk.len());
        let mut chunk_ious = Vec::with_capacity(chunk.len());
        for record in chunk {
            let img = load_rgb(&manifest.image_path(record))?;
            let gt_box = record.bbox()?;
            let (bbox, box_iou) = match &opts.boxes {
                None => (gt_box, None),
                Some(map) => {
                    let b = map
                        .get(&record.image)
                        .ok_or_else(|| Error::invalid(format!("no predicted box for {}", record.image)))?;
                    let b = BoundingBox::from_array(*b)?;
                    (b, Some(iou(&b, &gt_box)?))
                }
            };
            let transform = CropTransform::from_bbox(&bbox, record.frame(), size, opts.pad_fraction)?;
            prepared.push(prepare_with_transform(record, &img, transform)?);
            chunk_ious.push(box_iou);
        }
        let refs: Vec<&PreparedSample> = prepared.iter().collect();
        let preds = predictor.predict(&refs)?;
        if preds.len() != chunk.len() {
            return Err(Error::invalid("predictor returned the wrong number of results"));
        }
        for ((record, pred), box_iou) in chunk.iter().zip(preds).zip(chunk_ious) {
            let gt = record.fingertips_px();
            for (c, &d) in counts.iter_mut().zip(&opts.deltas) {
                c.merge(&match_fingertips(&pred, &gt, d));
            }
            let pairs = match_fingertips(&pred, &gt, f64::INFINITY);
            let average_error = average_pixel_error(std::slice::from_ref(&pairs));
            actual += gt.present_count();
            detected += pred.present_count();
            ious.extend(box_iou);
            all_pairs.push(pairs);
            images.push(ImageResult {
                image: record.image.clone(),
                prediction: pred,
                ground_truth: gt,
                average_error,
                iou: box_iou,
            });
        }
    }

    let per_threshold = counts
        .iter()
        .zip(&opts.deltas)
        .map(|(c, &delta)| {
            let (precision, recall, f1) = precision_recall_f1(c.tp, c.fp, c.fn_);
            ThresholdMetrics {
                delta,
                precision,
                recall,
                f1,
                tp: c.tp,
                fp: c.fp,
                fn_: c.fn_,
            }
        })
        .collect();
    let avg = average_pixel_error(&all_pairs);
    let per_image: Vec<f64> = images.iter().filter_map(|r| r.average_error).collect();
    let cde = if per_image.is_empty() {
        Vec::new()
    } else {
        let thresholds = opts
            .cde_thresholds
            .clone()
            .unwrap_or_else(|| default_cde_thresholds(&per_image));
        cde_curve(&per_image, &thresholds)?
    };
    let mean_iou = (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64);
    let report = MetricsReport {
        schema_version: REPORT_SCHEMA_VERSION,
        images: images.len(),
        avg_pixel_error: avg.unwrap_or(0.0),
        avg_pixel_error_defined: avg.is_some(),
        per_threshold,
        cde,
        actual_fingertips: actual,
        detected_fingertips: detected,
        mean_iou,
        metadata: RunMetadata {
            manifest: manifest.path.display().to_string(),
            deltas: opts.deltas.clone(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            ..Default::default()
        },
    };
    Ok(Evaluation { report, images })
}

/// Hex SHA-256 of a file.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Loads a checkpoint, evaluates it and optionally writes the report.
///
/// With `anchor_count`, the checkpoint must have been trained for that grid.
pub fn evaluate(
    checkpoint: &Path,
    manifest: &Manifest,
    opts: &EvalOptions,
    anchor_count: Option<usize>,
    out_report: Option<&Path>,
) -> Result<Evaluation> {
    let model = match anchor_count {
        Some(n) => {
            let meta = crate::network::read_checkpoint_meta(checkpoint)?;
            load_checkpoint_for_grid::<f32>(checkpoint, n, meta.input_size)?.0
        }
        None => load_checkpoint::<f32>(checkpoint)?.0,
    };
    let mut predictor = ModelPredictor::new(model)?;
    let mut eval = evaluate_predictor(&mut predictor, manifest, opts)?;
    eval.report.metadata.checkpoint = Some(checkpoint.display().to_string());
    eval.report.metadata.checkpoint_sha256 = Some(file_sha256(checkpoint)?);
    if let Some(path) = out_report {
        eval.report.write(path)?;
    }
    Ok(eval)
}
