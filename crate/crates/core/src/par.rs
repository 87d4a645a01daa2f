//! Chunked data-parallel helpers.
//!
//! Work over particles is split into fixed-size chunks whose boundaries do
//! not depend on the thread count. Partial results are combined with a
//! pairwise tree in chunk order, so parallel and sequential execution give
//! bit-identical sums.
//!
//! With the `parallel` feature the chunks run on the rayon pool; without it
//! (or after [`set_parallel(false)`](set_parallel)) they run in order on the
//! calling thread.

use std::sync::atomic::{AtomicBool, Ordering};

/// Particles per work chunk.
pub const CHUNK: usize = 64;

static PARALLEL: AtomicBool = AtomicBool::new(true);

/// Enable or disable the rayon path at runtime. Has no effect when the crate
/// is built without the `parallel` feature.
pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled, Ordering::Relaxed);
}

/// Whether chunk maps currently dispatch to rayon.
pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && PARALLEL.load(Ordering::Relaxed)
}

/// Ranges `[start, end)` covering `0..n` in chunks of `chunk`.
pub fn chunk_ranges(n: usize, chunk: usize) -> Vec<(usize, usize)> {
    let chunk = chunk.max(1);
    (0..n.div_ceil(chunk)).map(|c| (c * chunk, ((c + 1) * chunk).min(n))).collect()
}

/// Apply `f` to every chunk range of `0..n`, returning results in chunk order.
pub fn map_chunks<R, F>(n: usize, chunk: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize, usize) -> R + Sync + Send,
{
    let ranges = chunk_ranges(n, chunk);
    #[cfg(feature = "parallel")]
    {
        if is_parallel() && ranges.len() > 1 {
            use rayon::prelude::*;
            return ranges.into_par_iter().map(|(a, b)| f(a, b)).collect();
        }
    }
    ranges.into_iter().map(|(a, b)| f(a, b)).collect()
}

/// Apply `f` to each index, in parallel when enabled. Output order matches input.
pub fn map_indices<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if is_parallel() && n > 1 {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

/// Pairwise (tree) sum with a fixed association order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        2 => xs[0] + xs[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
        }
    }
}

/// Elementwise tree reduction of equally sized vectors.
pub fn tree_reduce_vecs(mut parts: Vec<Vec<f64>>) -> Vec<f64> {
    if parts.is_empty() {
        return Vec::new();
    }
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                for (x, y) in a.iter_mut().zip(&b) {
                    *x += *y;
                }
            }
            next.push(a);
        }
        parts = next;
    }
    parts.pop().unwrap()
}
