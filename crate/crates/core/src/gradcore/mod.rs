//! Dense numeric engine: matrices, layers with explicit backward passes,
//! the log-loss, Adam, and the finite-difference gradient oracle.

mod check;
mod dense;
mod loss;
mod matrix;
mod param;
mod rng;

pub use check::{finite_diff_grad, finite_diff_model, max_rel_error, DEFAULT_STEP, REL_FLOOR};
pub use dense::{sigmoid, softmax_in_place, Activation, Dense, Mlp};
pub use loss::{logloss, sample_logloss, sigmoid_logloss, PROB_EPS};
pub use matrix::{dot, Matrix};
pub use param::{Adam, HasParams, Parameter};
pub use rng::{DetRng, RngState};
