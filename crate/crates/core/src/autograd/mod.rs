//! Reverse-mode automatic differentiation over [`Tensor`](crate::Tensor)s.
//!
//! A [`Tape`] records every operation executed through it together with the
//! intermediates its gradient rule needs. [`Tape::backward`] replays the log
//! in reverse from a scalar and leaves a gradient on every node that
//! (transitively) depends on a leaf created with `requires_grad`.
//!
//! With recording switched off the same kernels run, so forward values are
//! bit-identical, but nothing is cached and no gradients can be produced.

mod ops;
mod tape;

pub use ops::{gelu_scalar, NormMode, RunningStats};
pub use tape::{Tape, Var};
