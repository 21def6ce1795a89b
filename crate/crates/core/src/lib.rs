//! Compressed-sensing reconstruction toolkit.
//!
//! Classical ISTA/FISTA solvers with an orthonormal block-DCT sparsity prior,
//! and FHDUN, a hierarchical deep unfolding of FISTA whose phases run in
//! several scale spaces at once and generate their momentum and step-size
//! hyperparameters from the current content.

pub mod checkpoint;
pub mod dct;
pub mod error;
pub mod fixtures;
pub mod image;
pub mod metrics;
pub mod model;
pub mod sampling;
pub mod scale_space;
pub mod solvers;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use image::Image;
