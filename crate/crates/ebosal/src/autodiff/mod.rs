//! Reverse-mode automatic differentiation on 64-bit float tensors.
//!
//! Graphs are define-by-run: each forward pass appends nodes to a [`Tape`]
//! and the tape replays the chain rule backwards from a scalar root. There
//! is no persistent graph; training loops rebuild one per mini-batch.

mod sgd;
mod tape;
mod tensor;

pub use sgd::{sgd_step, Sgd, SgdConfig};
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;

pub(crate) use tape::logsumexp_slice;
