//! Dense real-matrix arithmetic and the numerical primitives shared by every
//! other module.

mod finite_diff;
mod matrix;
pub(crate) mod reduce;
mod rng;

pub use finite_diff::{finite_difference_grad, relative_error, GradCheckReport};
pub use matrix::{argmax, dot, Matrix};
pub use reduce::{entropy, log_sum_exp, row_softmax, softmax_in_place};
pub use rng::RngState;
