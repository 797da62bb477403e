//! Data-parallel loop helpers.
//!
//! Parallelism in this crate only ever partitions *disjoint output regions*
//! (samples, channels, records); no floating-point reduction crosses a task
//! boundary, so the parallel and sequential paths produce bit-identical
//! results and the `parallel` cargo feature can be dropped without changing
//! any artifact. Each helper takes a runtime `parallel` flag so callers (and
//! the benchmarks) can compare both paths in one build.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Apply `f(chunk_index, chunk)` over `data` split into `chunk`-sized pieces
/// (last piece may be short).
pub fn chunks_mut_indexed<T, F>(parallel: bool, data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    assert!(chunk > 0, "chunk size must be positive");
    #[cfg(feature = "parallel")]
    if parallel {
        data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
        return;
    }
    let _ = parallel;
    for (i, c) in data.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}

/// Apply `f(chunk_index, a_chunk, b_chunk)` over two buffers split in
/// lockstep — the in-place pattern where one pass writes a transform and a
/// cache (or reads one buffer while mutating the other chunk-for-chunk).
pub fn zip_chunks_mut<A, B, F>(
    parallel: bool,
    a: &mut [A],
    chunk_a: usize,
    b: &mut [B],
    chunk_b: usize,
    f: F,
) where
    A: Send,
    B: Send,
    F: Fn(usize, &mut [A], &mut [B]) + Sync,
{
    assert!(chunk_a > 0 && chunk_b > 0, "chunk sizes must be positive");
    assert_eq!(
        a.len().div_ceil(chunk_a),
        b.len().div_ceil(chunk_b),
        "buffers must split into the same number of chunks"
    );
    #[cfg(feature = "parallel")]
    if parallel {
        a.par_chunks_mut(chunk_a)
            .zip(b.par_chunks_mut(chunk_b))
            .enumerate()
            .for_each(|(i, (ca, cb))| f(i, ca, cb));
        return;
    }
    let _ = parallel;
    for (i, (ca, cb)) in a.chunks_mut(chunk_a).zip(b.chunks_mut(chunk_b)).enumerate() {
        f(i, ca, cb);
    }
}

/// Collect `f(0..n)` in index order.
pub fn map_indexed<R, F>(parallel: bool, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = parallel;
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk_indices_cover_all_elements() {
        for &parallel in &[false, true] {
            let mut v = vec![0u32; 10];
            chunks_mut_indexed(parallel, &mut v, 4, |i, c| {
                for x in c.iter_mut() {
                    *x = i as u32 + 1;
                }
            });
            assert_eq!(v, [1, 1, 1, 1, 2, 2, 2, 2, 3, 3]);
        }
    }

    #[test]
    fn map_preserves_order() {
        assert_eq!(map_indexed(true, 5, |i| i * i), vec![0, 1, 4, 9, 16]);
        assert_eq!(map_indexed(false, 5, |i| i * i), vec![0, 1, 4, 9, 16]);
    }

    #[test]
    fn zipped_chunks_stay_in_lockstep() {
        for &parallel in &[false, true] {
            let mut a = vec![0u32; 6];
            let mut b = vec![0u64; 9];
            zip_chunks_mut(parallel, &mut a, 2, &mut b, 3, |i, ca, cb| {
                ca.fill(i as u32);
                cb.fill(10 + i as u64);
            });
            assert_eq!(a, [0, 0, 1, 1, 2, 2]);
            assert_eq!(b, [10, 10, 10, 11, 11, 11, 12, 12, 12]);
        }
    }
}
