//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature the helpers dispatch to rayon unless
//! parallelism has been switched off at runtime with [`set_enabled`].
//! Every helper produces bit-identical results in both modes: work items
//! are independent and their outputs are never reduced across threads in
//! a data-dependent order.

#[cfg(feature = "parallel")]
use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[cfg(feature = "parallel")]
static ENABLED: AtomicBool = AtomicBool::new(true);

/// Switches the rayon path on or off. A no-op without the `parallel` feature.
pub fn set_enabled(on: bool) {
    #[cfg(feature = "parallel")]
    ENABLED.store(on, Ordering::Relaxed);
    #[cfg(not(feature = "parallel"))]
    let _ = on;
}

/// Whether the helpers currently run on the rayon pool.
pub fn is_enabled() -> bool {
    #[cfg(feature = "parallel")]
    {
        ENABLED.load(Ordering::Relaxed)
    }
    #[cfg(not(feature = "parallel"))]
    {
        false
    }
}

/// Calls `f(i, chunk)` for every `chunk_len`-sized chunk of `data`.
pub(crate) fn for_each_chunk<F>(data: &mut [f64], chunk_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if chunk_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if is_enabled() {
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    data.chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

/// Collects `f(i)` for `i in 0..n`, preserving index order.
pub(crate) fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_enabled() {
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Maps `f` over a slice, preserving order.
pub(crate) fn map_slice<S, T, F>(items: &[S], f: F) -> Vec<T>
where
    S: Sync,
    T: Send,
    F: Fn(&S) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_enabled() {
        return items.par_iter().map(f).collect();
    }
    items.iter().map(f).collect()
}
