//! Stage-wise reprogramming distillation from a frozen teacher network into a
//! small student network.

pub mod autograd;
pub mod checkpoint;
pub mod cotraining;
pub mod data;
pub mod diagnostics;
pub mod error;
mod gemm;
pub mod harness;
pub mod kernels;
pub mod models;
pub mod nn;
pub mod pretrain;
pub mod reprogramming;
pub mod staging;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
