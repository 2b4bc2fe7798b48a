//! Dense `f64` tensors with a define-by-run reverse-mode tape.
//!
//! A [`Graph`] records every operation as it is evaluated, so node order is
//! already topological. [`Graph::backward`] sweeps it once in reverse and
//! accumulates gradients additively across fan-out. Each graph is owned by
//! one thread; independent graphs can run concurrently.

mod gradcheck;
mod graph;
mod kernels;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{eval_and_backward, sigmoid, softmax_in_place, CustomOp, Gradients, Graph, Var};
pub use kernels::{bilinear_sample, AvgPool2Op, BilinearSampleOp, Conv3x3Op};
pub use optim::{poly_lr, AdamW, AdamWConfig};
pub use params::ParamStore;
pub use tensor::Tensor;
