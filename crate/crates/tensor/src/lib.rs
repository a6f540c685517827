//! Dense tensors, neural layer primitives and reverse-mode differentiation.
//!
//! Everything is generic over [`Real`] so that models written once run in
//! `f32` for training and inference and in `f64` for gradient audits.

mod error;
pub mod gradcheck;
pub mod graph;
pub mod init;
pub mod ops;
pub mod param;
mod real;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{BackwardFn, Gradients, Graph, RegionGuard, Var};
pub use ops::{conv_output_len, transposed_output_len, BatchStats, Conv3dGeometry};
pub use param::{ParamStore, Parameter, Session};
pub use real::Real;
pub use tensor::Tensor;

pub use ops::{normal_cdf, sigmoid_scalar, softplus_scalar};
