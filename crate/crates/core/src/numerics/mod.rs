//! Dense-tensor reverse-mode autodiff, the optimizer, and the gradient
//! checker. Everything downstream builds on [`Graph`] and [`Tensor`].
//!
//! A graph is single-threaded; distinct graphs may run on distinct threads.
//! Tensors detached from any graph are plain data and freely sendable.

mod gradcheck;
mod graph;
mod optim;
mod tensor;

pub use gradcheck::{
    finite_diff_check, registered_op_names, run_all_checks, topk_tie_degenerate, GradCheckReport,
    OpCheckOutcome,
};
pub use graph::{matmul_at_raw, matmul_bt_raw, matmul_raw, Graph, Var, LOG_CLAMP};
pub use optim::{Adam, ParamStore};
pub use tensor::Tensor;
