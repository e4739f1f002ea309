//! Tumor image retrieval via multitask learning on volumetric data.
//!
//! The crate is organized along the experiment's data flow:
//!
//! - [`phantom`]: deterministic synthetic brain volumes with labeled tumors.
//! - [`nn`] and [`model`]: a small 3D CNN engine and the ResNet-like backbone
//!   with a segmentation head, RoiPool and per-task linear heads.
//! - [`training`]: patch sampling, the weighted multitask loss and SGD with
//!   Nesterov momentum under a step schedule.
//! - [`retrieval`]: embedding tables, exact KNN search and evaluation,
//!   bounding-box distortion and a read-only HTTP query endpoint.
//! - [`viz`]: t-SNE projection and static figure/CSV emitters.
//! - [`pipeline`]: end-to-end experiment orchestration with resumable stages.

pub mod error;
pub mod geometry;
pub mod hashing;
pub mod model;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod retrieval;
pub mod training;
pub mod viz;

pub use error::{Error, Result};
pub use geometry::BBox;
