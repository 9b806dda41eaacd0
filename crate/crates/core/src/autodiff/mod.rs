//! Dense tensors with a tape-based reverse-mode autodiff engine whose
//! backward pass is itself differentiable.

mod kernels;
mod params;
mod tape;
mod tensor;

pub use params::{ParamVector, Segment};
pub use tape::{backward, hvp, Tape};
pub use tensor::Tensor;
