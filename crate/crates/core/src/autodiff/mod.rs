//! Minimal reverse-mode differentiation engine: a tensor type, a tape of
//! recorded operators with their backward rules, and optimizers.

pub mod gradcheck;
pub mod kernels;
mod optim;
mod params;
mod tape;
mod tensor;

pub use optim::{Optimizer, OptimizerKind};
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Real, Tensor};
