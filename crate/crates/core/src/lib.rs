//! Toolkit for multi-sensor spacetime raster pipelines.

// NaN-aware comparisons are written as negations on purpose
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

pub mod manifest;
pub mod pipeline;
pub mod delayed;
pub mod graft;
pub mod raster;
pub mod sampler;
pub mod stitch;
pub mod track;
mod scalar;

pub use manifest::AffineTransform;
pub use scalar::Scalar;

/// Double-precision affine transform, the form stored in manifests.
pub type Affine = AffineTransform<f64>;
pub type Affine32 = AffineTransform<f32>;
