//! Data-parallel helpers with a sequential fallback.
//!
//! Built with the `parallel` feature (default) these fan out over rayon;
//! without it they run sequentially. Callers must keep reductions
//! order-independent of scheduling: map into an index-ordered `Vec`, then
//! combine sequentially. Both builds then produce bit-identical results,
//! and so does any thread count.

/// Chunk size used when splitting batches for parallel accumulation.
/// Fixed (not derived from the thread count) so that the reduction tree,
/// and therefore floating-point rounding, is identical everywhere.
pub const BATCH_CHUNK: usize = 32;

#[cfg(feature = "parallel")]
pub fn map_indexed<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Map over fixed-size chunks of `0..n` and combine the per-chunk results
/// in chunk order with `combine`. The chunk boundaries depend only on `n`.
pub fn chunked_reduce<U, F, C>(n: usize, chunk: usize, f: F, mut combine: C) -> Option<U>
where
    U: Send,
    F: Fn(std::ops::Range<usize>) -> U + Sync + Send,
    C: FnMut(U, U) -> U,
{
    if n == 0 {
        return None;
    }
    let nchunks = n.div_ceil(chunk);
    let parts = map_indexed(nchunks, |i| {
        let lo = i * chunk;
        let hi = (lo + chunk).min(n);
        f(lo..hi)
    });
    let mut it = parts.into_iter();
    let first = it.next()?;
    Some(it.fold(first, |acc, x| combine(acc, x)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunked_reduce_matches_sequential_sum() {
        let xs: Vec<f64> = (0..1000).map(|i| (i as f64).sin()).collect();
        let par = chunked_reduce(
            xs.len(),
            BATCH_CHUNK,
            |r| r.map(|i| xs[i]).sum::<f64>(),
            |a, b| a + b,
        )
        .unwrap();
        // Same fixed chunking, done by hand.
        let mut seq = 0.0;
        for c in xs.chunks(BATCH_CHUNK) {
            seq += c.iter().sum::<f64>();
        }
        assert_eq!(par.to_bits(), seq.to_bits());
    }

    #[test]
    fn chunked_reduce_empty_is_none() {
        let r = chunked_reduce(0, 8, |_| 0.0f64, |a, b| a + b);
        assert!(r.is_none());
    }
}
