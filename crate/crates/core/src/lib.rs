//! Hyper-network generated diffusion models with aleatoric/epistemic
//! uncertainty decomposition.

pub mod checkpoint;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod experiments;
pub mod gradchecks;
pub mod hyper;
pub mod models;
pub mod numerics;
pub mod plot;
pub mod rng;
pub mod tensor;
pub mod uq;

pub use error::{Error, Result};
pub use tensor::Tensor;
