//! Partial-diffusion super-resolution: closed-form forward noising, a
//! noise-predicting UNet with hand-written gradients, latent-aligned
//! training, and samplers that start the reverse process from the diffused
//! low-resolution input instead of pure noise.

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod forward;
pub mod nn;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::ImageTensor;
