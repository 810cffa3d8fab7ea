//! Convolutional broad learning system.
//!
//! Convolutional feature layers learn their filters with spherical K-means on
//! normalised, whitened patches; convolutional enhancement layers use fixed
//! random weights. All node groups are fused by channel concatenation and a
//! spatial pyramid, and a ridge-regression output layer is solved in closed
//! form. The output layer can be widened afterwards with block
//! pseudo-inverse updates instead of retraining.

pub mod archive;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod incremental;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod patch;
pub mod ridge;
pub mod skm;
pub mod tensor;

pub use error::{Error, Result};
