//! Joint learning and unlearning of spurious attributes on synthetic data.
//!
//! A small reverse-mode autodiff engine drives an MLP feature extractor
//! with one primary head and any number of secondary heads. Training
//! alternates between fitting the secondary heads and updating the
//! representation so that those heads output uniform distributions.

pub mod autodiff;
pub mod checkpoint;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod trainer;

pub use error::{Error, Result};
