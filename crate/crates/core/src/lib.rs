//! Progressive stage-wise self-supervised learning.
//!
//! A backbone is split into resolution blocks, blocks are grouped into
//! overlapping stages, and each stage is trained on its own level of a
//! multi-level pretext task with gradients kept inside the stage.

pub mod checkpoint;
pub mod data;
pub mod engine;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod partition;
pub mod raster;
pub mod rng;
pub mod tasks;

pub use error::{Error, Result};
