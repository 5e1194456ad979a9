//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Operations are recorded on a [`Tape`] as they run; [`Tape::backward`]
//! replays them in reverse to accumulate gradients. Shapes must match
//! exactly except that either operand of an elementwise op may be a
//! one-element tensor.

mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_params};
pub use optim::Sgd;
pub use params::{Bound, ParamId, Params};
pub use tape::{Gradients, Tape, Var, LOG_FLOOR};
pub use tensor::Tensor;
