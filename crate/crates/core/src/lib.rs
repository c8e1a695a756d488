pub mod adapters;
pub mod analysis;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod numerics;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Single-precision aliases used by training and the command line.
pub type Tensor32 = numerics::Tensor2D<f32>;
pub type Params32 = model::TransformerParams<f32>;
pub type Adapters32 = adapters::AdapterSet<f32>;

/// Double-precision aliases used by the gradient and analytic oracles.
pub type Tensor64 = numerics::Tensor2D<f64>;
pub type Params64 = model::TransformerParams<f64>;
pub type Adapters64 = adapters::AdapterSet<f64>;
