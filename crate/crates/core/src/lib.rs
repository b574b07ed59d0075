//! Modality-invariant keypoint features for multimodal image registration.
//!
//! Pipeline: base keypoints and descriptors plus dense semantic features
//! ([`features`]) are refined by latent feature aggregation ([`lfa`]), fused
//! by the cumulative hybrid attention stack ([`cha`]), scored by dual-softmax
//! matching ([`matcher`]), trained from single-image homography pairs
//! ([`training`]) and evaluated with registration protocols ([`evaluation`]).

pub mod autodiff;
pub mod cha;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod geometry;
pub mod lfa;
pub mod matcher;
pub mod model;
pub mod nn;
pub mod training;

pub use error::{Error, Result};
