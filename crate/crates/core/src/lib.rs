//! RoPAD: a presentation attack detection CNN trained with unsupervised
//! adversarial invariance, built on a small reverse-mode autodiff engine.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision for the common cases.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use autodiff::{Activation, Graph, LossKind, Mode, Padding, Var};
pub use error::TensorError;
pub use params::{ParamGroup, ParamId, ParamStore};
pub use rng::Rng;
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
