//! Minimal dense tensor engine with reverse-mode automatic differentiation.
//!
//! Values are [`Tensor`]s; computations are recorded on a [`Graph`] through
//! [`Var`] handles and differentiated with [`Graph::backward`]. Element types
//! implement [`Real`]: `f32` for training and `f64` for gradient checks.

mod error;
mod gradcheck;
mod graph;
pub mod kernels;
mod real;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, Coord, GradCheckConfig, GradCheckReport};
pub use graph::{BnParams, ConvParams, Gradients, Graph, RunningStats, Var};
pub use kernels::conv::ConvGeom;
pub use real::Real;
pub use tensor::Tensor;
