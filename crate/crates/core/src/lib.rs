pub mod data;
pub mod ensemble;
pub mod error;
pub mod explain;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Single-precision tensor, the default for training and inference.
pub type Tensor = tensor::Tensor<f32>;
pub type Graph = tensor::Graph<f32>;
pub type Model = model::TransformerModel<f32>;
pub type ParamStore = nn::ParamStore<f32>;

/// Double-precision counterparts, used where finite differences need headroom.
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph64 = tensor::Graph<f64>;
pub type Model64 = model::TransformerModel<f64>;
