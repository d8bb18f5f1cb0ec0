//! Data-parallel dispatch for the numeric kernels.
//!
//! With the `parallel` feature (default) chunked loops run on the rayon pool;
//! without it, or after [`set_parallel(false)`](set_parallel), they run in order
//! on the calling thread. Chunk boundaries never depend on the thread count and
//! every output element is produced by exactly one chunk, so both paths yield
//! bit-identical results.

use std::sync::atomic::{AtomicBool, Ordering};

static PARALLEL: AtomicBool = AtomicBool::new(cfg!(feature = "parallel"));

/// Environment variable that forces sequential, fully deterministic execution.
pub const DETERMINISTIC_ENV: &str = "NICEGAN_DETERMINISTIC";

/// Enables or disables the parallel path at runtime. A no-op without the
/// `parallel` feature.
pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled && cfg!(feature = "parallel"), Ordering::Relaxed);
}

pub fn parallel_enabled() -> bool {
    PARALLEL.load(Ordering::Relaxed)
}

/// Reads [`DETERMINISTIC_ENV`]; any value other than empty/`0`/`false` selects
/// sequential execution. Returns whether deterministic mode is on.
pub fn configure_from_env() -> bool {
    let on = std::env::var(DETERMINISTIC_ENV)
        .map(|v| !matches!(v.trim(), "" | "0" | "false"))
        .unwrap_or(false);
    if on {
        set_parallel(false);
    }
    on
}

/// Calls `f(chunk_index, chunk)` for consecutive `chunk_len`-sized pieces of `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    let chunk_len = chunk_len.max(1);
    #[cfg(feature = "parallel")]
    if parallel_enabled() && data.len() > chunk_len {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    data.chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

/// Maps `f` over `0..n`, preserving order.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() && n > 1 {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}
