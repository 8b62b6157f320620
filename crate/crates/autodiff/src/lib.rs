//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! The operation set is deliberately small: matrix products, the
//! convolution/pooling/resampling kernels a multi-slice detector needs,
//! softmax, layer norm, GELU, and the shape plumbing between them.

mod error;
pub mod gradcheck;
pub mod io;
pub mod kernels;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{gradcheck, relative_error, GradcheckReport};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
