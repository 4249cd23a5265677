//! Where fingertips sit relative to their hand box.

use serde::{Deserialize, Serialize};

use super::manifest::SampleRecord;

/// Histogram bins over the normalized edge distance range `[0, 0.5]`.
pub const EDGE_BINS: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeDistanceStats {
    pub count: usize,
    pub bin_width: f64,
    pub histogram: [usize; EDGE_BINS],
    pub mean: f64,
    pub median: f64,
}

/// Distance from a normalized-frame point to the nearest edge of `bbox`,
/// in bbox-normalized units (0 on an edge, 0.5 at the center).
pub fn edge_distance(bbox: [f64; 4], tip: [f64; 2]) -> f64 {
    let [x0, y0, x1, y1] = bbox;
    let u = (tip[0] - x0) / (x1 - x0);
    let v = (tip[1] - y0) / (y1 - y0);
    u.min(1.0 - u).min(v).min(1.0 - v)
}

pub fn edge_distance_statistics(records: &[SampleRecord]) -> EdgeDistanceStats {
    let mut distances: Vec<f64> = records
        .iter()
        .flat_map(|r| r.fingertips.iter().flatten().map(move |t| edge_distance(r.bbox, *t)))
        .collect();
    let bin_width = 0.5 / EDGE_BINS as f64;
    let mut histogram = [0; EDGE_BINS];
    for d in &distances {
        let bin = ((d.clamp(0.0, 0.5) / bin_width) as usize).min(EDGE_BINS - 1);
        histogram[bin] += 1;
    }
    let count = distances.len();
    let mean = if count > 0 {
        distances.iter().sum::<f64>() / count as f64
    } else {
        0.0
    };
    distances.sort_by(f64::total_cmp);
    let median = match count {
        0 => 0.0,
        n if n % 2 == 1 => distances[n / 2],
        n => 0.5 * (distances[n / 2 - 1] + distances[n / 2]),
    };
    EdgeDistanceStats {
        count,
        bin_width,
        histogram,
        mean,
        median,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{synth_records, SynthConfig};

    fn rec(tips: [Option<[f64; 2]>; 5]) -> SampleRecord {
        SampleRecord {
            image: "a.png".into(),
            width: 100,
            height: 100,
            bbox: [0.2, 0.2, 0.6, 0.8],
            fingertips: tips,
        }
    }

    #[test]
    fn edge_and_center() {
        assert_eq!(edge_distance([0.2, 0.2, 0.6, 0.8], [0.2, 0.5]), 0.0);
        assert!((edge_distance([0.2, 0.2, 0.6, 0.8], [0.4, 0.5]) - 0.5).abs() < 1e-12);
        let s = edge_distance_statistics(&[rec([Some([0.2, 0.5]), Some([0.4, 0.5]), None, None, None])]);
        assert_eq!(s.count, 2);
        assert_eq!(s.histogram[0], 1);
        assert_eq!(s.histogram[EDGE_BINS - 1], 1);
        assert!((s.mean - 0.25).abs() < 1e-12);
        assert!((s.median - 0.25).abs() < 1e-12);
    }

    #[test]
    fn empty_input() {
        let s = edge_distance_statistics(&[]);
        assert_eq!(s.count, 0);
        assert_eq!(s.median, 0.0);
    }

    /// Straightforward scan of the seed-7 synthetic set, frozen as a golden value.
    #[test]
    fn synthetic_golden_median() {
        let records = synth_records(&SynthConfig {
            count: 500,
            seed: 7,
            ..Default::default()
        })
        .unwrap();
        let mut d: Vec<f64> = Vec::new();
        for r in &records {
            for t in r.fingertips.iter().flatten() {
                let [x0, y0, x1, y1] = r.bbox;
                let u = (t[0] - x0) / (x1 - x0);
                let v = (t[1] - y0) / (y1 - y0);
                d.push([u, 1.0 - u, v, 1.0 - v].into_iter().fold(f64::INFINITY, f64::min));
            }
        }
        d.sort_by(f64::total_cmp);
        let scan = if d.len() % 2 == 1 { d[d.len() / 2] } else { 0.5 * (d[d.len() / 2 - 1] + d[d.len() / 2]) };
        let stats = edge_distance_statistics(&records);
        assert_eq!(stats.count, d.len());
        assert!((stats.median - scan).abs() < 1e-12);
        println!("median edge distance = {:.6} over {} tips", stats.median, stats.count);
        assert!((stats.median - GOLDEN_MEDIAN).abs() < 1e-6, "median {}", stats.median);
        // tips cluster near the box edges
        assert!(stats.median < 0.1);
    }

    const GOLDEN_MEDIAN: f64 = 0.090948;
}
