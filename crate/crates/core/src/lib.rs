//! Sequence VAE training with adversarial word dropout.
//!
//! The crate is generic over the element type through [`Scalar`]; training
//! runs in `f32` and reference computations (gradient checks, oracles) in
//! `f64`. The aliases below name the two instantiations.

pub mod adversary;
pub mod diffcore;
pub mod metrics;
pub mod objectives;
mod error;
pub mod seqvae;
pub mod textdata;
pub mod trainer;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = diffcore::Tensor<f32>;
pub type Tensor64 = diffcore::Tensor<f64>;
pub type Graph32 = diffcore::Graph<f32>;
pub type Graph64 = diffcore::Graph<f64>;
