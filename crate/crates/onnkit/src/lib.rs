//! onnkit: a desk-scale toolkit for hybrid optical neural networks.
//!
//! The pipeline has three stages: designing an optical frontend and
//! estimating its achievable accuracy with tangent-kernel regression before
//! any training; training the hybrid student against a digital teacher with
//! tangent-kernel distillation; and compensating simulated fabrication
//! errors by retraining only the digital backend. Analysis utilities cover
//! kernel perturbation scaling, parameter-Gram compressibility, the
//! random-frontend ablation, and a MAC/energy cost model.

pub mod ckpt;
pub mod config;
pub mod cost;
pub mod data;
pub mod error;
pub mod export;
pub mod layout;
pub mod metrics;
pub mod net;
pub mod ntk;
pub mod optics;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
