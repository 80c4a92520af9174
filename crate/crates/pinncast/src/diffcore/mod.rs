//! Minimal differentiable tensor core.
//!
//! Provides exactly the operations the forecaster needs, each with an
//! analytic backward pass recorded on a [`Tape`]. The contract for every
//! operation is that its gradient matches central finite differences; the
//! checks live in [`crate::checks`] and in the unit tests below each op.
//!
//! All computation is 64-bit. Ops never mutate their inputs, and tensors are
//! plain owned buffers, so values can move freely between threads; a single
//! tape, however, is used from one thread at a time.

mod tape;
mod tensor;

pub use tape::{Tape, Vid};
pub use tensor::Tensor;

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}
