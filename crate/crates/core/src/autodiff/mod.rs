//! Dense tensors and a reverse-mode tape.

mod tape;
mod tensor;

pub use tape::{jacobian, Tape, Var};
pub use tensor::{matmul, matvec, Tensor};
