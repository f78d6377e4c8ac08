//! Reverse-mode differentiation with differentiable gradients.
//!
//! [`ExprGraph`] records matrix-valued operations; [`Objective`] packages a
//! scalar loss over a flat parameter vector and provides `evaluate`,
//! `gradient` and `hvp`.

mod graph;
mod objective;

pub use graph::{ExprGraph, NodeId};
pub use objective::{hvp_nodes, probe_constant, quadratic_form_node, HvpSession, Objective, ParamLeaf, Recording};
