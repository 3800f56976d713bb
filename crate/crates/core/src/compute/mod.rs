//! Minimal differentiable dense-array substrate.

mod array;
mod kernels;
mod tape;

pub use array::Array;
pub use tape::{Gradients, Tape, Var};
