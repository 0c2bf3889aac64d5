//! Multi-step channel prediction for multi-antenna links.
//!
//! The numeric core (tensors, autodiff, layers, models) is generic over the
//! scalar type through [`scalar::Real`]; the aliases below fix it to `f32`
//! for training and `f64` for gradient checks and least squares.

pub mod attention;
mod binio;
pub mod channel;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod models;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod train_eval;

pub use error::{Error, Result};

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph32 = graph::Graph<f32>;
pub type Graph64 = graph::Graph<f64>;
pub type ParamStore32 = params::ParamStore<f32>;
pub type ParamStore64 = params::ParamStore<f64>;
pub type NeuralModel32 = models::NeuralModel<f32>;
pub type NeuralModel64 = models::NeuralModel<f64>;
