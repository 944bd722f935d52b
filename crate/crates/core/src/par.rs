//! Shard-parallel map with a deterministic, order-preserving collect.
//!
//! Work is cut into shards whose boundaries depend only on the input length
//! and the shard size, never on the thread count. Callers reduce the returned
//! per-shard results left to right, so the parallel path and the sequential
//! fallback agree bit for bit.

use std::ops::Range;
use std::sync::atomic::{AtomicBool, Ordering};

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Routes every shard map through the calling thread (the reference path).
pub fn set_sequential(on: bool) {
    FORCE_SEQUENTIAL.store(on, Ordering::Relaxed);
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.load(Ordering::Relaxed)
}

pub fn shard_ranges(len: usize, shard: usize) -> Vec<Range<usize>> {
    let shard = shard.max(1);
    (0..len)
        .step_by(shard)
        .map(|s| s..(s + shard).min(len))
        .collect()
}

pub fn map_shards<T, F>(len: usize, shard: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(Range<usize>) -> T + Sync + Send,
{
    let ranges = shard_ranges(len, shard);
    #[cfg(feature = "parallel")]
    if is_parallel() && ranges.len() > 1 {
        use rayon::prelude::*;
        return ranges.into_par_iter().map(f).collect();
    }
    ranges.into_iter().map(f).collect()
}

/// Maps `f` over `0..len` one index at a time, preserving order.
pub fn map_indices<T, F>(len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() && len > 1 {
        use rayon::prelude::*;
        return (0..len).into_par_iter().map(f).collect();
    }
    (0..len).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges_cover_input() {
        let r = shard_ranges(10, 4);
        assert_eq!(r, vec![0..4, 4..8, 8..10]);
        assert!(shard_ranges(0, 4).is_empty());
    }

    #[test]
    fn order_is_preserved() {
        let v = map_shards(100, 7, |r| r.start);
        let expected: Vec<usize> = (0..100).step_by(7).collect();
        assert_eq!(v, expected);
        assert_eq!(map_indices(5, |i| i * i), vec![0, 1, 4, 9, 16]);
    }
}
