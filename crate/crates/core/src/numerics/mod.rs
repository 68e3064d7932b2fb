//! Dense `f64` tensors and a reverse-mode compute graph.

mod fd;
mod graph;
mod tensor;

pub use fd::{finite_diff_grad, gradcheck, relative_error};
pub use graph::{Graph, Var};
pub use tensor::Tensor;


/// Default clamp for cosine-similarity denominators.
pub const COSINE_EPS: f64 = 1e-8;
