//! Two-branch pose estimation: a full-image branch and a person-crop branch,
//! each a small convolutional stem feeding patch tokens into one transformer
//! encoder alongside learnable keypoint queries. The keypoint query outputs
//! are projected to per-joint heatmaps, decoded by argmax with quarter-cell
//! refinement, and scored with OKS-based average precision and PCKh.

pub mod augment;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
