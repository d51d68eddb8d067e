//! Tensor arithmetic, reverse-mode differentiation and the Adam optimizer.

mod adam;
mod gradcheck;
mod tape;

pub use adam::{AdamState, DEFAULT_LEARNING_RATE};
pub use gradcheck::{finite_diff_check, GradCheckReport, FD_STEP};
pub use tape::{Gradients, Tape, Var};

#[cfg(test)]
mod tests;
