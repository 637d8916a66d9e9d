pub mod convdeepsets;
pub mod error;
pub mod gp;
pub mod kernels;
pub mod latent;
pub mod linalg;
pub mod model;
pub mod params;
pub mod random;
pub mod scalar;
pub mod tapekernel;
pub mod task;
pub mod taskgen;
pub mod training;
pub mod verify;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Double-precision aliases for the common entry points.
pub type Model64 = model::Model<f64>;
pub type Task64 = task::Task<f64>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type KernelBank64 = kernels::KernelBank<f64>;
pub type Trainer64 = training::Trainer<f64>;
pub type Prediction64 = model::Prediction<f64>;
pub type CategoricalParams64 = latent::CategoricalParams<f64>;
