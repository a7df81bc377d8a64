//! Self-supervised multi-modal spatial evaluation and deformable registration.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the working precision used by training and the command line.

pub mod benchmark;
pub mod error;
pub mod evaluation;
pub mod evaluator;
pub mod image;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod registration;
pub mod remap;
pub mod rng;
pub mod scalar;
pub mod transforms;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Image = image::ImageGrid<f32>;
pub type Field = image::DeformationField<f32>;
pub type Errors = image::ErrorMap<f32>;
pub type Image64 = image::ImageGrid<f64>;
pub type Field64 = image::DeformationField<f64>;
