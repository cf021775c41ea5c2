//! Dense-tensor expression graphs with reverse-mode differentiation.
//!
//! Gradients are emitted as new nodes of the same graph, so they compose to
//! any order. [`fd_gradient`] is the central-difference oracle the rest of the
//! crate is tested against.

mod backward;
mod fd;
mod graph;

pub use backward::{GradNodes, GradientMap};
pub use fd::{compare_gradients, fd_gradient, FdError, GradCheck};
pub use graph::{sigmoid, smooth_abs, Bindings, Graph, Node, NodeId, Op, OpKind, Values, SMOOTH_ABS_EPS};
pub(crate) use graph::{cosine_rows, log_softmax_rows, matmul};
