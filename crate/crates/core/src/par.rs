//! Data-parallel building blocks with a sequential fallback.
//!
//! Compiled with the `parallel` feature (default) these fan out over the
//! global rayon pool; without it they degrade to plain iteration. Callers
//! must only hand over element-wise independent work: every output element
//! is produced by exactly one closure invocation with a fixed internal
//! reduction order, so thread count never changes results.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Work sizes below this are not worth a fork-join round trip.
pub const PAR_THRESHOLD: usize = 4096;

/// Caps the worker pool at `n` threads. Must run before any parallel work;
/// later calls are ignored (rayon pools are build-once).
pub fn init_threads(n: usize) {
    #[cfg(feature = "parallel")]
    {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = n;
    }
}

/// Applies `f` to disjoint `chunk`-sized windows of `data`, passing the
/// chunk index. `work_per_item` is a cost hint used to skip the pool for
/// small tensors.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, work_per_item: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    assert!(chunk > 0, "chunk size must be positive");
    #[cfg(feature = "parallel")]
    {
        if data.len().saturating_mul(work_per_item.max(1)) >= PAR_THRESHOLD {
            data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
            return;
        }
    }
    let _ = work_per_item;
    for (i, c) in data.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}

/// Maps `0..n` through `f`, preserving index order in the output.
pub fn map_collect<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        return (0..n).into_par_iter().map(f).collect();
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunked_map_matches_sequential() {
        let mut out = vec![0usize; 1000];
        for_each_chunk_mut(&mut out, 7, 10_000, |i, c| {
            for (j, v) in c.iter_mut().enumerate() {
                *v = i * 1000 + j;
            }
        });
        let expect: Vec<usize> = (0..1000).map(|k| (k / 7) * 1000 + k % 7).collect();
        assert_eq!(out, expect);
    }

    #[test]
    fn map_collect_orders_by_index() {
        let v = map_collect(513, |i| i * 3);
        assert!(v.iter().enumerate().all(|(i, &x)| x == i * 3));
    }
}
