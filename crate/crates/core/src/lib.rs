//! Semi-supervised 3D lesion detection.
//!
//! The pipeline trains a small anchor-based 3D detector on labeled scans
//! together with unlabeled scans whose anchor targets are predicted by the
//! model itself (ensembled over cube symmetries and sharpened), mixes
//! samples at image and object level, and optimizes a focal loss that
//! accepts soft targets. Evaluation reports FROC curves and the CPM score.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision used for training and for reference checks.

pub mod anchors;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod inference;
pub mod loss;
pub mod model;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod ssl;
pub mod transforms;
pub mod volume;

pub use anchors::{AnchorGrid, AnchorMask, AnchorTargets, Detection, LevelSpec};
pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use loss::FocalParams;
pub use model::{Detector, DetectorConfig};
pub use scalar::Scalar;
pub use ssl::{SslConfig, TrainConfig};
pub use transforms::CubeTransform;
pub use volume::{Box3D, GenConfig, LabeledScan, Volume3D};

/// Single-precision volume used for training and inference.
pub type Volume = Volume3D<f32>;
/// Double-precision volume for reference computations.
pub type Volume64 = Volume3D<f64>;
/// Single-precision detector used for training and inference.
pub type Model = Detector<f32>;
/// Double-precision detector for gradient checks.
pub type Model64 = Detector<f64>;
pub type Targets = AnchorTargets<f32>;
pub type Targets64 = AnchorTargets<f64>;
