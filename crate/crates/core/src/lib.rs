//! Learned multiscale codec for dynamic point cloud geometry.
//!
//! Frames are voxelized point clouds stored as [`tensor::SparseTensor3`].
//! A frame is coded scale by scale from an 8³ base grid upward: at each
//! scale a sparse convolutional network predicts the occupancy of every
//! candidate child voxel, and a range coder spends bits according to those
//! probabilities. P-frames additionally condition the networks on features
//! extracted from the previous reconstruction.

pub mod codec;
pub mod entropy;
pub mod error;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod sopa;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
