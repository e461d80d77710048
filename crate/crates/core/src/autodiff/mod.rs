//! Tape-based reverse-mode differentiation over dense `f64` matrices, a
//! parameter store with Adam, a finite-difference checker and the binary
//! checkpoint format.

pub mod checkpoint;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use params::{AdamConfig, ParamId, ParamStore};
pub use tape::{sigmoid, softplus, Csr, Gradients, Rulebook, Tape, Var, NO_NEIGHBOR};
pub use tensor::{matmul, Tensor};
