//! Dense `f64` arrays, an operation tape with reverse-mode gradients, and Adam.

mod adam;
mod gemm;
pub mod gradcheck;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use tape::{Gradients, Op, Tape, Var};
pub use tensor::Tensor;
