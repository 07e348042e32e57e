//! Inpainting of large rectangular holes in textures by patch-wise CNN
//! texture synthesis.
//!
//! A hole is filled patch by patch. Each patch is optimized so that its
//! feature statistics under a convolutional network match those of a
//! reference patch (the detail branch) while, embedded into an average-pooled
//! view of its surroundings, it also matches global statistics (the global
//! branch). A boundary term keeps already-known pixels in place and
//! overlapping patches are joined along minimum-error seams.

pub mod embed;
pub mod error;
pub mod lbfgs;
pub mod network;
pub mod parallel;
pub mod pipeline;
pub mod quilt;
pub mod search;
pub mod stats;
pub mod tensor;

pub use error::{Error, Placement, Result, Stage};
pub use network::{FeatureNetwork, MaskPyramid, Topology};
pub use pipeline::{inpaint, InpaintJob, PatchSchedule, RunReport};
pub use stats::LossWeights;
pub use tensor::{ImageBuffer, Rect, RegionSpec, Tensor};
