//! Semi-supervised neural architecture search for segmentation.

pub mod autograd;
pub mod candidate_ops;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod nasvit;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod report;
pub mod supernet;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
