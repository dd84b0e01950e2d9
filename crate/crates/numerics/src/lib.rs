//! Dense `f64` tensor arithmetic, a reverse-mode differentiation tape and the
//! Adam optimizer.
//!
//! Shapes here are small (a few hundred per side at most), so kernels are
//! plain row-major loops with no BLAS.

mod adam;
mod error;
pub mod kernels;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use error::{NumericError, Result};
pub use kernels::{
    causal_softmax, cross_entropy_nll, kl_div, matmul, softmax, transpose, PROB_FLOOR,
};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
