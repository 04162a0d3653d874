//! Recurrent residual stereo matching on rectified image pairs.
//!
//! The crate provides the full stack for a disparity-range-generalizing
//! stereo matcher: differentiable geometric primitives, the learnable
//! network (feature extractor, base disparity/occlusion estimators, a
//! recurrent residual updater and a normalized local refinement head),
//! training with a composite multi-scale loss, a procedural synthetic
//! stereo dataset with exact ground truth, and a two-phase patch-tiled
//! inference pipeline for images far larger than the training size.

pub mod autodiff;
pub mod error;
pub mod kernels;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
