//! Layer attribution, sparse autoencoders, explanation optimizers and cohort analysis,
//! built on a small reverse-mode autodiff engine.

pub mod attribution;
pub mod autodiff;
pub mod checkpoint;
pub mod cohort;
pub mod embedding;
pub mod error;
pub mod metrics;
pub mod optim;
pub mod optimizer;
pub mod propagation;
pub mod rng;
pub mod sae;
pub mod surrogate;

pub use autodiff::{jacobian, Tape, Tensor, Var};
pub use error::{Error, Result};
