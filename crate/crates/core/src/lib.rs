//! Strassenified ternary convolutions, per-layer hybrid filter banks,
//! analytic cost models and a small training harness built on a
//! reverse-mode autodiff tape.

pub mod cost;
pub mod error;
pub mod hybrid;
mod linalg;
pub mod nn;
pub mod scalar;
pub mod spn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Tape, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type SpnConvLayer32 = spn::SpnConvLayer<f32>;
pub type SpnConvLayer64 = spn::SpnConvLayer<f64>;
pub type Network32 = hybrid::Network<f32>;
pub type Network64 = hybrid::Network<f64>;
pub type HybridBankLayer32 = hybrid::HybridBankLayer<f32>;
pub type HybridBankLayer64 = hybrid::HybridBankLayer<f64>;
