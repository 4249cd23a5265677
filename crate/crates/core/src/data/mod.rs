//! Manifests, synthetic data and training-sample construction.

pub mod augment;
pub mod manifest;
pub mod rotate;
pub mod stats;
pub mod synth;

pub use augment::{
    make_training_sample, prepare_sample, prepare_with_transform, stack_inputs, AppliedAugmentation,
    AugmentationConfig, PreparedSample, TrainingSample,
};
pub use manifest::{load_manifest, write_manifest, Manifest, ManifestIssue, ManifestOptions, SampleRecord};
pub use rotate::{rotate_bbox, rotate_dataset, rotate_frame_point, rotate_sample};
pub use stats::{edge_distance, edge_distance_statistics, EdgeDistanceStats, EDGE_BINS};
pub use synth::{generate_synthetic, synth_records, Scene, SynthConfig};

use std::path::Path;

use image::RgbImage;

use crate::error::{Error, Result};

/// Reads an image file as 8-bit RGB.
pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    image::open(path)
        .map(|i| i.to_rgb8())
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}
