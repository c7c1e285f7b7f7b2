//! Dense-tensor reverse-mode automatic differentiation.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{
    analytic_gradients, finite_diff_check, finite_diff_check_with, relative_error,
    GradCheckOptions, GradCheckReport,
};
pub use graph::{
    argmax, inject_backward_fault, log_softmax, sigmoid, softmax, Graph, OpKind, Var,
};
pub use tensor::Tensor;
