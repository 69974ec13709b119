//! Differentiable primitives, implemented as methods on [`Tape`](crate::Tape).

mod conv;
mod elementwise;
mod linalg;
mod loss;
mod norm;
mod pool;
mod shape;

pub use norm::{BatchNormMode, BatchStats};

use crate::{Result, TensorError};

pub(crate) fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(TensorError::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

pub(crate) fn expect_rank(op: &'static str, shape: &[usize], rank: usize, what: &str) -> Result<()> {
    if shape.len() != rank {
        return Err(TensorError::shape(
            op,
            format!("{what} must have rank {rank}, got shape {shape:?}"),
        ));
    }
    Ok(())
}
