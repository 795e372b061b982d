//! Small deterministic reverse-mode differentiation over dense `f64` matrices.

mod matrix;
mod optim;
mod tape;

pub use matrix::{linear_forward, sign, sign_binarize, DenseMatrix};
pub use optim::{minibatches, OptimizerState, Schedule};
pub use tape::{sigmoid, Gradients, Tape, Var};
