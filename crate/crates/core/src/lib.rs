//! Anchor-based fingertip position estimation.
//!
//! A hand crop is resized to a square model input. Around the square's
//! boundary sit `N` fixed anchors; for each of the five finger slots the
//! network classifies the nearest anchor (or "absent") and regresses a
//! 2-vector offset from it.

pub mod data;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod network;
pub mod nn;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub use data::{AugmentationConfig, Manifest, SampleRecord, SynthConfig};
pub use evaluation::{EvalOptions, MetricsReport};
pub use network::ModelConfig;
pub use training::TrainConfig;

pub type Point = geometry::Point2<f64>;
pub type Fingertips = geometry::FingertipSet<f64>;
pub type Box2 = geometry::BoundingBox<f64>;
pub type Anchors = geometry::AnchorGrid<f64>;
pub type Crop = geometry::CropTransform<f64>;
/// Single-precision network used for training and inference.
pub type Model = network::FingertipNet<f32>;
pub type Model64 = network::FingertipNet<f64>;
