//! Weakly supervised object detection from image-level labels.
//!
//! A MIL detection head scores proposals, `K` refinement stages learn from
//! pseudo ground truths mined from the previous stage, and a similarity head
//! trained with a weighted contrastive loss drives the discovery of further
//! same-class instances beyond each stage's top-scoring proposal.

pub mod data;
pub mod discovery;
pub mod engine;
mod error;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod par;
pub mod rng;
pub mod sampling;

pub use error::{Error, Result};
