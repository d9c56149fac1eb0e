//! Dense tensors, forward kernels and tape-based reverse-mode gradients.

mod dropout;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod memory;
pub mod ops;
mod params;
pub mod rng;
mod scalar;
mod tensor;

pub use dropout::Dropout;
pub use gradcheck::{grad_check, GradCheck, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use memory::MemoryProbe;
pub use ops::{layer_norm, matmul, omega, row_softmax, Omega, SoftmaxMask, LAYER_NORM_EPS};
pub use params::{ParamId, ParamStore};
pub use rng::RngState;
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
