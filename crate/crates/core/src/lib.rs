//! Domain-confused contrastive learning for unsupervised domain adaptation,
//! built on a small reverse-mode autodiff engine.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the scalar to `f64`, which the training drivers and the
//! test suite use.

pub mod autodiff;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod perturb;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph64 = autodiff::Graph<f64>;
pub type Params64 = model::Params<f64>;
pub type TrainOutcome64 = train::TrainOutcome<f64>;
