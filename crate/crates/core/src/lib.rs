//! Toolkit for building, auto-labeling, validating and benchmarking visual
//! quality grounding corpora: triplets of image, quality text and distortion
//! segmentation.

pub mod agreement;
pub mod dataset;
pub mod mask;
pub mod msfa;
pub mod scorer;
pub mod som;
pub mod synth;

pub use mask::{Dims, DistortionClass, LabelMap, MaskError, RegionMask};
