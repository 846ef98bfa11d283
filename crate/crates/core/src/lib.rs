//! Joint-centric seizure detection from video.
//!
//! Pose keypoints and frames are cut into 5 s segments, each joint gets its
//! own tracked crop, a shared video encoder turns every crop into a motion
//! token, and a cross-joint attention head classifies the segment as ictal or
//! interictal. Numeric code is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision for common use.

pub mod autograd;
pub mod cropper;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod fusion;
pub mod ingestion;
pub mod lora;
pub mod nn;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod segmenter;
pub mod synthgen;
pub mod tensor;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};
pub use scalar::Scalar;

pub type Matrix32 = tensor::Matrix<f32>;
pub type Matrix64 = tensor::Matrix<f64>;
pub type ReferenceEncoder32 = encoder::ReferenceEncoder<f32>;
pub type ReferenceEncoder64 = encoder::ReferenceEncoder<f64>;
pub type FusionHead32 = fusion::FusionHead<f32>;
pub type FusionHead64 = fusion::FusionHead<f64>;
pub type Model32 = trainer::Model<f32>;
pub type Model64 = trainer::Model<f64>;
pub type Sample32 = trainer::Sample<f32>;
pub type Sample64 = trainer::Sample<f64>;
