//! Multi-level semantic image transmission over a simulated AWGN channel.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the two instantiations used in practice.

pub mod baseline;
pub mod channel;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod extractors;
pub mod metrics;
pub mod nn;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use config::{ModelConfig, Variant};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Params32 = nn::ParameterSet<f32>;
pub type Params64 = nn::ParameterSet<f64>;
pub type ImageBatch32 = data::ImageBatch<f32>;
pub type ImageBatch64 = data::ImageBatch<f64>;
