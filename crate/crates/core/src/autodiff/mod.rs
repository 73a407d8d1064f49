//! Reverse-mode automatic differentiation.

pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod params;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, REL_FLOOR};
pub use graph::{AttentionMask, Backward, Graph, NodeId};
pub use params::{Gradients, ParamId, ParamStore, Parameter};
