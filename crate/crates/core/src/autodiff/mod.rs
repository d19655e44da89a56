//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] is built fresh for every evaluation: inputs are recorded as
//! leaves or constants, each operation appends a node holding its forward
//! value, and [`Tape::backward`] walks the nodes in decreasing id order.

mod matrix;
mod tape;

pub use matrix::Matrix;
pub use tape::{Gradients, NodeId, Op, Tape};

pub(crate) use tape::{log_sigmoid, log_sum_exp, rbf_gram_value, sigmoid};
