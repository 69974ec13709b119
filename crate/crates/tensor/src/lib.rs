//! Reverse-mode automatic differentiation over small dense tensors.
//!
//! The engine is deliberately narrow: it implements exactly the primitives the
//! three adbench architectures need (2-D convolution, pooling, batch and layer
//! normalisation, attention building blocks, weighted cross-entropy) plus an
//! Adam optimiser, a finite-difference gradient checker and a checkpoint
//! format. Everything is generic over [`Scalar`] so gradients can be verified
//! in `f64` while training runs in `f32`.
//!
//! Kernels that loop over a batch run through [`exec`], which dispatches to
//! rayon when the `parallel` feature is on and strict mode is off. Every
//! reduction is performed in a fixed order, so both paths produce identical
//! bits.

pub mod checkpoint;
mod error;
pub mod exec;
pub mod gradcheck;
pub mod nn;
mod ops;
pub mod optim;
pub mod primitives;
mod scalar;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use ops::{BatchNormMode, BatchStats};
pub use scalar::{gemm, Scalar};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
