//! Average-velocity flow models with closed-form mixture oracles.
//!
//! [`network`] holds the conditioned MLP `F(x_t, s, t | c, ω)` with exact
//! forward- and reverse-mode derivatives, [`objectives`] the flow matching,
//! MeanFlow and FlowConsist losses, and [`oracle`] the analytic Gaussian
//! mixture marginals used to check all of it.

pub mod checkpoint;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod io;
pub mod network;
pub mod objectives;
pub mod oracle;
pub mod scalar;
pub mod sampler;
pub mod schedule;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{DualTensor, Tensor};

/// Double-precision tensor, used by training and every diagnostic.
pub type Tensor64 = Tensor<f64>;
/// Single-precision tensor.
pub type Tensor32 = Tensor<f32>;
pub type Params64 = network::ModelParams<f64>;
