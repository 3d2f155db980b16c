//! Cyclic bootstrap labeling for weakly supervised object detection.
//!
//! The crate trains a small detector from image-level labels only. A
//! two-stream multiple-instance head (MIDN) scores region proposals, a cascade
//! of online instance classifiers refines its pseudo labels, and an R-CNN head
//! learns classification and box regression from mined seeds. A mirrored
//! teacher network, updated by weighted exponential moving averages of the
//! student heads, supplies ranking targets for the MIDN and confidence for the
//! mined seeds.
//!
//! Everything runs on deterministic synthetic scenes (see [`synthscene`]) so
//! the full pipeline fits on a laptop CPU and every loss has an analytic
//! gradient that can be checked against finite differences.

pub mod checkpoint;
pub mod crd;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod midn;
pub mod model;
pub mod msr;
pub mod numcore;
pub mod oic;
pub mod synthscene;
pub mod trainer;
pub mod wet;

pub use error::{Error, Result};
pub use geometry::BBox;
pub use numcore::{AffineParams, Mat};
