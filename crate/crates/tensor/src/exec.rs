//! Execution policy for batch-level kernels.
//!
//! `ADBENCH_STRICT=1` (or [`set_strict`]) forces the sequential path. Both
//! paths split work into the same fixed-size groups and reduce partial results
//! in group order, so outputs are bit-identical regardless of thread count.

use std::sync::atomic::{AtomicU8, Ordering};
use std::sync::OnceLock;

const UNSET: u8 = 0;
const OFF: u8 = 1;
const ON: u8 = 2;

static STRICT_OVERRIDE: AtomicU8 = AtomicU8::new(UNSET);
static STRICT_ENV: OnceLock<bool> = OnceLock::new();

/// Environment variable that forces bit-reproducible sequential kernels.
pub const STRICT_ENV_VAR: &str = "ADBENCH_STRICT";

/// Whether strict (sequential, fixed-order) execution is in force.
pub fn strict() -> bool {
    match STRICT_OVERRIDE.load(Ordering::Relaxed) {
        ON => true,
        OFF => false,
        _ => *STRICT_ENV.get_or_init(|| {
            std::env::var(STRICT_ENV_VAR).map(|v| v.trim() == "1").unwrap_or(false)
        }),
    }
}

/// Override the environment. `None` restores the `ADBENCH_STRICT` behaviour.
pub fn set_strict(value: Option<bool>) {
    let v = match value {
        Some(true) => ON,
        Some(false) => OFF,
        None => UNSET,
    };
    STRICT_OVERRIDE.store(v, Ordering::Relaxed);
}

/// True when kernels may fan out over rayon.
pub fn parallel() -> bool {
    cfg!(feature = "parallel") && !strict()
}

/// `(0..n).map(f).collect()`, possibly in parallel. Output order is index order.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel() && n > 1 {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Calls `f(i, chunk_i)` for each `chunk`-sized piece of `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if parallel() && data.len() > chunk {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
        return;
    }
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Number of batch items folded into one partial sum by reducing kernels.
pub(crate) const REDUCE_GROUP: usize = 8;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_indexed_preserves_order() {
        let v = map_indexed(100, |i| i * 2);
        assert_eq!(v, (0..100).map(|i| i * 2).collect::<Vec<_>>());
    }

    #[test]
    fn chunks_cover_everything() {
        let mut v = vec![0usize; 10];
        for_each_chunk_mut(&mut v, 3, |i, c| c.iter_mut().for_each(|x| *x = i));
        assert_eq!(v, vec![0, 0, 0, 1, 1, 1, 2, 2, 2, 3]);
    }
}
