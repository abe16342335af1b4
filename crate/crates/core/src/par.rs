//! Thin switch between rayon and plain iterators.
//!
//! Every helper yields results in index order, so reductions performed by
//! callers are deterministic regardless of the `parallel` feature or the
//! thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this many scalar operations a kernel stays on the calling thread.
pub const MIN_PARALLEL_WORK: usize = 1 << 15;

pub fn enabled() -> bool {
    cfg!(feature = "parallel")
}

/// Number of worker threads kernels may use.
pub fn threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

/// `f(i)` for `i in 0..n`, collected in index order.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// `f(item)` for every item, collected in order.
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Runs `f(chunk_index, chunk)` over `chunk`-sized pieces of `data`.
/// `work` estimates the total scalar operations and decides whether the
/// split is worth it.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, work: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    {
        if work >= MIN_PARALLEL_WORK && threads() > 1 {
            data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
            return;
        }
    }
    let _ = work;
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_range_preserves_order() {
        let v = map_range(100, |i| i * 2);
        assert_eq!(v, (0..100).map(|i| i * 2).collect::<Vec<_>>());
    }

    #[test]
    fn chunks_cover_everything_once() {
        let mut v = vec![0usize; 1 << 16];
        for_each_chunk_mut(&mut v, 1000, usize::MAX, |ci, c| {
            for (j, x) in c.iter_mut().enumerate() {
                *x += ci * 1000 + j;
            }
        });
        assert!(v.iter().enumerate().all(|(i, &x)| i == x));
    }
}
