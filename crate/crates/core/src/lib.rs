//! Test-time adaptation with a reservoir of domain-specialist models.
//!
//! A frozen feature extractor turns each incoming batch into a style vector;
//! an online clustering of those styles detects domains, and each domain owns
//! a copy of the classifier parameters that is adapted only on its batches.

pub mod clustering;
pub mod data;
pub mod error;
pub mod info;
pub mod matrix;
pub mod model_reservoir;
pub mod rng;
pub mod stream;
pub mod style;
pub mod theory;
pub mod tta;

pub use error::{Error, Result};
pub use matrix::Matrix;
