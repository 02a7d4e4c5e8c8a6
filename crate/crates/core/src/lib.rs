//! Per-class critical paths in small CNNs.
//!
//! The crate holds a deterministic CNN engine (five layer kinds with
//! hand-written backward passes), neuron contribution analysis, activation
//! maximization, and a distiller that rewrites a trained network into a
//! smaller one-vs-all classifier without retraining.
//!
//! It is `no_std` + `alloc`; enable the `std` feature for runtime CPU feature
//! detection in the GEMM kernels.

#![cfg_attr(not(any(test, feature = "std")), no_std)]

extern crate alloc;

pub mod amviz;
pub mod analysis;
pub mod codec;
pub mod data;
pub mod distiller;
mod error;
pub mod evaluator;
pub mod layer;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use error::{Error, FormatError, Result};
pub use layer::{layer_backward, layer_forward, LayerCache, LayerKind, LayerParams, ParamGrads};
pub use model::{build_model, ActivationCache, ArchSpec, InputShape, Logits, Model, ParamStats};
pub use tensor::{finite_diff_grad, Scalar, Tensor};
