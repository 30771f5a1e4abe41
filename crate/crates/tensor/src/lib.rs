//! Dense tensors and a minimal reverse-mode autodiff tape.
//!
//! Values are row-major buffers. Differentiable computation happens on a
//! [`Tape`]: every op returns a [`Var`] handle and [`Tape::backward`] walks the
//! recorded nodes in reverse. Parameters live in a [`ParamSet`] and are bound
//! onto a fresh tape for each forward pass.

mod error;
mod gradcheck;
mod params;
pub mod rng;
mod scalar;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use params::{Bound, ParamId, ParamSet};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Exact GELU on a single value, `x·Φ(x)`.
pub fn gelu<T: Scalar>(x: T) -> T {
    tape::gelu_scalar(x)
}
