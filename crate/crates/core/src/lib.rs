//! Point cloud completion with learned shape priors.
//!
//! The pipeline trains a point auto-encoder on complete shapes, then trains
//! a completion network whose partial-input features are pulled toward the
//! frozen auto-encoder's features (an L2 feature-matching term and an MMD
//! adversarial term) while a coarse-to-fine decoder reconstructs the
//! complete cloud.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod losses;
pub mod network;
pub mod pointops;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
