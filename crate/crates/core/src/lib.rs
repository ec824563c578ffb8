//! Equivariant graph networks with virtual nodes, a reverse-mode autodiff
//! tape to train them, a charged-particle simulator to generate data, and a
//! thread-based distributed runtime.

pub mod autodiff;
pub mod dist;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod nbody;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
