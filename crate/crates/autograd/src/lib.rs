//! Reverse-mode automatic differentiation over dense row-major matrices.
//!
//! Every value is a 2-D [`Mat`]; feature maps use `[height*width, channels]`.
//! A [`Graph`] records one forward pass and [`Graph::backward`] returns
//! gradients for the parameter leaves registered with [`Graph::param`].

mod graph;
mod mat;
mod ops;
mod real;

pub use graph::{GradSink, Gradients, Graph, Var};
pub use mat::Mat;
pub use ops::ResamplePlan;
pub use ops::{causal_mask, MASKED};
pub use real::Real;
