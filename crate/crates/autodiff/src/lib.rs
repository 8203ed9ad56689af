//! Dense-tensor reverse-mode differentiation.
//!
//! The engine records operations on a [`Tape`] as they are evaluated
//! eagerly. Values live on the tape and are addressed through [`Var`]
//! handles; [`Tape::backward`] walks the recorded nodes in reverse and
//! returns the gradient of a scalar output with respect to every leaf that
//! was registered as a parameter.
//!
//! Everything is generic over [`Scalar`], so the same model code runs in
//! `f32` for training and in `f64` for finite-difference oracles.

mod adam;
mod error;
pub mod gradcheck;
pub mod kernels;
pub mod linalg;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use error::{AutodiffError, Result};
pub use params::{ParamId, ParamStore};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
