//! Minimal numeric stack: dense matrices and a reverse-mode autodiff tape.

pub mod check;
pub mod graph;
pub mod mat;

pub use check::{grad_check_named, GradCheckReport};
pub use graph::{AttnCfg, Graph, Rope, Var};
pub use mat::{dot, Mat, Real};
