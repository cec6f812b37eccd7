//! Collaborative filtering with a synthetic feedback loop.
//!
//! A variational recommender is trained jointly with a virtual user that
//! scores its recommendations and feeds an embedding of that judgment back
//! into the next recommendation, closing the loop. The crate is generic
//! over the floating-point scalar; training runs in f64, checkpoints store
//! f32.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod recommender;
pub mod virtual_user;
pub mod optim;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type ParamSet64 = params::ParamSet<f64>;
pub type ParamSet32 = params::ParamSet<f32>;
pub type GradSet64 = params::GradSet<f64>;
pub type Tape64 = tape::Tape<f64>;
