//! Open-set semantic segmentation for LiDAR scans.
//!
//! A shared encoder pools per-point features into cylindrical voxels; two
//! decoders produce closed-set logits and open-set features. Voxels whose
//! largest open-set feature falls at or below a threshold are relabeled as
//! unknown.

pub mod autodiff;
mod error;
pub mod io;
pub mod voxel;

pub use error::{Error, Result};
pub mod losses;
pub mod network;
pub mod metrics;
pub mod openset;
pub mod checkpoint;
pub mod trainer;
pub mod gradcheck;
