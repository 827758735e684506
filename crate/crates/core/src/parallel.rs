//! Deterministic parallel reduction.
//!
//! Work items are partitioned into a fixed number of index chunks; each chunk
//! is folded sequentially into its own accumulator and the chunk accumulators
//! are returned in chunk order. The partition depends only on the item count,
//! never on the worker count, so merged results are bit-identical for any
//! thread pool. The chunk accumulators double as the resampling units of the
//! path-level bootstrap in [`crate::stats`].

use rayon::prelude::*;

/// Number of chunks used by every estimator (and by the bootstrap).
pub const CHUNKS: u64 = 1024;

/// Bounds of chunk `c` when `n` items are split into `chunks` pieces.
fn chunk_bounds(n: u64, chunks: u64, c: u64) -> (u64, u64) {
    (c * n / chunks, (c + 1) * n / chunks)
}

/// Fold `step` over `0..n` in [`CHUNKS`] deterministic chunks.
///
/// Returns one accumulator per non-empty chunk, in chunk order.
pub fn chunked_fold<A, I, S>(n: u64, init: I, step: S) -> Vec<A>
where
    A: Send,
    I: Fn() -> A + Sync,
    S: Fn(&mut A, u64) + Sync,
{
    let chunks = CHUNKS.min(n.max(1));
    (0..chunks)
        .into_par_iter()
        .filter_map(|c| {
            let (lo, hi) = chunk_bounds(n, chunks, c);
            if lo == hi {
                return None;
            }
            let mut acc = init();
            for i in lo..hi {
                step(&mut acc, i);
            }
            Some(acc)
        })
        .collect()
}

/// Sequentially merge chunk accumulators (chunk order, hence deterministic).
pub fn merge<A>(parts: Vec<A>, mut join: impl FnMut(&mut A, A)) -> Option<A> {
    let mut it = parts.into_iter();
    let mut acc = it.next()?;
    for p in it {
        join(&mut acc, p);
    }
    Some(acc)
}
