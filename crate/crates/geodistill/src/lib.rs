//! Geometry-guided 2D-to-3D feature distillation for open-vocabulary
//! point-cloud segmentation.
//!
//! The pipeline projects per-view 2D features onto a point cloud, pools
//! them over geometric superpoints with learned reliability weights,
//! reconstructs instance masks from partial observations, and aligns
//! geometric and semantic similarity structure across instances. A small
//! reverse-mode tape drives training of the three lightweight heads.

pub mod cli;
pub mod distill;
pub mod error;
pub mod geometry;
pub mod inference;
pub mod io;
pub mod scalar;
pub mod superpoint;
pub mod synthbench;
pub mod tensorkit;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default dense matrix used throughout the pipeline.
pub type Mat = tensorkit::Matrix<f64>;
/// Default differentiation tape.
pub type Tape = tensorkit::Tape<f64>;
/// Default parameter store.
pub type ParamStore = tensorkit::ParamStore<f64>;
