//! Minimal dense-tensor engine with tape-based reverse-mode differentiation.
//!
//! Everything is 64-bit. Tensors are row-major; image-like tensors use the
//! `[channels, height, width]` layout. A [`Tape`] records primitive
//! operations as they are evaluated and [`Tape::backward`] propagates
//! adjoints back to the leaves. Parameter leaves carry an offset into a
//! caller-owned flat parameter vector so that gradients can be scattered
//! into a vector of the same layout.
//!
//! ```
//! use cogcas_autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::scalar(3.0), 0);
//! let y = tape.mul(x, x).unwrap();
//! let grads = tape.backward(y, None).unwrap();
//! assert_eq!(grads.param_vector(1), vec![6.0]);
//! ```

mod error;
pub mod finite_diff;
pub mod kernels;
pub mod optim;
mod tape;
mod tensor;

pub use error::{AdError, Result};
pub use finite_diff::{finite_diff_gradient, gradient_error};
pub use optim::{CosineSchedule, Optimizer, OptimizerKind};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
