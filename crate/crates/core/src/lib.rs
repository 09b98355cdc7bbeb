//! Desk-scale semantic scene completion with contextual instance queries.
//!
//! The crate provides the full inference pipeline — camera-geometry voxel
//! proposals, a deformable-attention decoder stack mediated by instance
//! queries, a dilated-convolution prediction head — together with the
//! composite training losses, occupancy/semantic metrics, a synthetic-scene
//! harness, and the verification machinery (brute-force oracles and
//! central-difference gradient checks) that the acceptance suite runs.

pub mod attention;
pub mod config;
pub mod error;
pub mod geometry;
pub mod gridio;
pub mod loss;
pub mod metrics;
pub mod numerics;
pub mod pipeline;
pub mod report;
pub mod scene;
pub mod tensor;

pub use error::{CoreError, Result};
pub use tensor::{LinearMap, Tensor};
