//! Knowledge distillation through a quantized visual-word space.
//!
//! A frozen teacher's feature maps are quantized against a k-means vocabulary
//! of visual words; the student learns to predict those word assignments with
//! a cosine-similarity predictor trained under a spatial KL loss.

pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod models;
pub mod ops;
pub mod params;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{DType, Gradient, Scalar, Tensor};
pub mod checkpoint;
pub mod data;
pub mod distill;
pub mod seed;
pub mod vocab;
