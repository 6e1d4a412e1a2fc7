//! Dense matrices, reverse-mode gradients and a finite-difference checker.

mod gradcheck;
mod matrix;
mod tape;

pub use gradcheck::finite_diff_check;
pub use matrix::{gaussian_init, matmul_calls, Matrix};
pub(crate) use matrix::gaussian_at;
pub use tape::{Gradients, Tape, Var};
pub(crate) use tape::weighted_outer_sum;
