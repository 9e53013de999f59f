//! Dense tensors and reverse-mode automatic differentiation.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod tensor;

pub use graph::{CustomOp, Graph, Node, NodeId, Op, RoundPolicy, Trace};
pub use tensor::Tensor;
