//! Dense tensor algebra with a recording reverse-mode engine whose gradients
//! are themselves differentiable.

mod functional;
mod graph;
pub mod unary;

pub use functional::{
    dense_hessian, finite_diff_grad, grad_at, graph_fn, hvp, jvp, lse, neg_log_prob, softmax,
    softmax_jacobian, vjp, LogitBundle,
};
pub use graph::{Graph, Var};
pub use unary::Unary;
