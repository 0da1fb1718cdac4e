//! Reverse-mode automatic differentiation over small static graphs.

mod check;
mod graph;
pub(crate) mod kernels;

pub use check::{finite_diff_check, finite_diff_check_with, FdConfig, FdReport, GraphFunction, ScalarFunction};
pub use graph::{Gradient, Graph, NodeId, Op};
