//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation as it runs. Calling
//! [`Tape::backward`] on a scalar result walks the record in reverse and
//! returns [`Gradients`] for every trainable leaf. The tape is rebuilt for
//! each evaluation; a given tape supports exactly one backward sweep.

pub mod kernels;
mod ops;
mod tape;
mod tensor;

pub use tape::{BackwardCtx, BackwardFn, ExecMode, Gradients, Tape, Var};
pub use tensor::Tensor;
