//! Reverse-mode differentiation over dense tensors.
//!
//! Besides the usual primitives the graph provides two gradient-shaping
//! nodes: [`Graph::reverse_grad`] (identity forward, negated gradient
//! backward) and [`Graph::straight_through`] (forward value of a hard
//! tensor, gradient routed to a relaxed one).

mod gradcheck;
mod graph;
pub mod rng;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, GradSign};
pub use graph::{Graph, LeafKind, NodeId};
pub use tensor::Tensor;
