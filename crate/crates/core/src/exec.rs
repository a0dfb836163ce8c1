//! Batch execution helpers.
//!
//! All data-parallel loops in the crate go through this module. With the
//! `parallel` feature (on by default) they run on the rayon pool; without it,
//! or when [`set_sequential`] forces it at runtime, they run on the calling
//! thread. Every helper writes each index's result into its own slot, so the
//! output is bit-identical no matter which mode or thread count is in use —
//! benchmarks flip the runtime switch to compare the two paths in one binary.

use std::sync::atomic::{AtomicBool, Ordering};

use crate::error::{Error, Result};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Force (or release) sequential execution at runtime, overriding the
/// `parallel` feature. Affects all subsequent batch helpers process-wide.
pub fn set_sequential(force: bool) {
    FORCE_SEQUENTIAL.store(force, Ordering::SeqCst);
}

/// True when batch helpers will run on the calling thread.
pub fn sequential_forced() -> bool {
    cfg!(not(feature = "parallel")) || FORCE_SEQUENTIAL.load(Ordering::SeqCst)
}

/// Configure the global thread budget. `0` keeps the library default (one
/// thread per core); `1` forces the sequential path. Returns an error if a
/// different per-process pool size was already fixed.
pub fn configure_threads(threads: usize) -> Result<()> {
    if threads == 1 {
        set_sequential(true);
        return Ok(());
    }
    #[cfg(feature = "parallel")]
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

/// Map `f` over `0..n`, collecting results in index order.
pub fn batch_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if !sequential_forced() {
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Fallible variant of [`batch_map`]; returns the first error by index order.
pub fn try_batch_map<T, F>(n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if !sequential_forced() {
        let results: Vec<Result<T>> = (0..n).into_par_iter().map(f).collect();
        return results.into_iter().collect();
    }
    (0..n).map(f).collect()
}

/// Apply `f` to equal-sized disjoint chunks of `data` (the last chunk may be
/// short). `f` receives the chunk index and the chunk.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    assert!(chunk_len > 0, "chunk_len must be positive");
    #[cfg(feature = "parallel")]
    if !sequential_forced() {
        data.par_chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
        return;
    }
    for (i, c) in data.chunks_mut(chunk_len).enumerate() {
        f(i, c);
    }
}

/// Run `f` with sequential execution forced, restoring the previous mode
/// afterwards. Used by benchmarks to compare both paths.
pub fn scoped_sequential<T>(f: impl FnOnce() -> T) -> T {
    let prev = FORCE_SEQUENTIAL.swap(true, Ordering::SeqCst);
    let out = f();
    FORCE_SEQUENTIAL.store(prev, Ordering::SeqCst);
    out
}
