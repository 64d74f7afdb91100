//! Scalar-generic numeric core: tensors, reverse-mode autodiff, layers,
//! and the Adam optimizer, plus deterministic RNG and artifact I/O.
//!
//! The whole stack is generic over [`scalar::Scalar`] (`f32` or `f64`).
//! Training runs in `f32`; the same code paths are cross-checked against
//! central finite differences in `f64`.

pub mod conv;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod nn;
pub mod optim;
pub mod pool;
pub mod rng;
pub mod scalar;

pub use graph::{Graph, Var};
pub use rng::{derive_seed, DetRng, RngState};
pub use scalar::{Scalar, ScalarKind};

/// Dynamic-rank tensor, the common currency of the stack.
pub type Tensor<T> = ndarray::ArrayD<T>;

/// Concrete aliases for the two supported precisions.
pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
