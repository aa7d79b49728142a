//! Grounding post-training for a tiny vision-language dual encoder:
//! masked average pooling of patch tokens against class prompts,
//! class-balanced mask sampling, low-rank projected AdamW, and the matching
//! evaluation battery, all in 64-bit arithmetic on a synthetic corpus.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod grounding;
pub mod linalg;
pub mod losses;
pub mod optim;
mod params;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
