//! Linear unified nested attention.
//!
//! Pack attention compresses a context of any length into a fixed number of
//! slots with an extra query sequence `P`; unpack attention reads those slots
//! back out at the original query length. Both stages are linear in sequence
//! length. The crate also provides the causal variant, encoder and decoder
//! layers, small models with a training loop, synthetic tasks, and a scaling
//! benchmark against full softmax attention.

pub mod attention;
pub mod bench;
pub mod cli;
pub mod error;
pub mod gradsuite;
pub mod layers;
pub mod model;
pub mod numerics;
pub mod tasks;

pub use error::{LunaError, Result};
pub use numerics::{Graph, ParamStore, Scalar, Tensor, Var};
