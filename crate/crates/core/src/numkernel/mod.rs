//! Minimal dense tensor engine with tape-based reverse-mode gradients.

mod gradcheck;
pub mod kernels;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_on, GradCheckReport};
pub use kernels::{rope_frequencies, RopeTable};
pub use params::{Bound, ParamStore};
pub use tape::{Tape, Var, BACKWARD_OPS};
pub use tensor::Tensor;
