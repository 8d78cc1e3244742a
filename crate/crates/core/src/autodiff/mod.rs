//! Reverse-mode automatic differentiation that is closed under its own
//! differentiation, giving exact Hessian-vector products.

mod graph;
mod tape;
mod tensor;

pub use graph::{CurvatureOperator, LossGraph, Objective, ParamLeaf, QuadraticObjective};
pub use tape::{Op, Tape, Var};
pub use tensor::Tensor;
