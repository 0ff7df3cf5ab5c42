//! Dense tensors and reverse-mode differentiation for the fixed op set the
//! pipeline uses.

mod adam;
pub mod check;
pub mod kernels;
pub mod laplace;
pub mod ops;
mod tape;
mod tensor;
pub mod tensor_io;

pub use adam::{adam_update, AdamConfig, AdamState};
pub use tape::{Tape, Var};
pub use tensor::{Real, Tensor};
