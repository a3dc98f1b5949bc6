//! Skin-lesion segmentation: occlusion augmentation, a compact
//! encoder-decoder network trained from scratch, multi-resolution
//! ensembling and Jaccard-based evaluation.

pub mod augment;
pub mod dataset;
pub mod ensemble;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod imaging;
pub mod metrics;
pub mod morphology;
pub mod nn;
pub mod rng;
pub mod synth;
pub mod train;

pub use error::{Error, ErrorKind, Result};
