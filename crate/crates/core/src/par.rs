//! Per-path loops that run on rayon when the `parallel` feature is on and
//! serially otherwise. Each closure sees only its own path, so results do
//! not depend on scheduling.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[cfg(feature = "parallel")]
const MIN_CHUNKS: usize = 256;

/// Calls `f(m, chunk)` for each `width`-sized chunk of `data`.
pub(crate) fn for_each_chunk<F>(data: &mut [f64], width: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if width == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    data.par_chunks_mut(width)
        .with_min_len(MIN_CHUNKS)
        .enumerate()
        .for_each(|(m, c)| f(m, c));
    #[cfg(not(feature = "parallel"))]
    data.chunks_mut(width).enumerate().for_each(|(m, c)| f(m, c));
}

/// Like [`for_each_chunk`] over two buffers split with the same indexing.
pub(crate) fn for_each_chunk2<F>(a: &mut [f64], wa: usize, b: &mut [f64], wb: usize, f: F)
where
    F: Fn(usize, &mut [f64], &mut [f64]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    a.par_chunks_mut(wa.max(1))
        .zip(b.par_chunks_mut(wb.max(1)))
        .with_min_len(MIN_CHUNKS)
        .enumerate()
        .for_each(|(m, (x, y))| f(m, x, y));
    #[cfg(not(feature = "parallel"))]
    a.chunks_mut(wa.max(1))
        .zip(b.chunks_mut(wb.max(1)))
        .enumerate()
        .for_each(|(m, (x, y))| f(m, x, y));
}

/// `(0..count).map(f).collect()`, in index order.
pub(crate) fn map_range<T, F>(count: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    return (0..count).into_par_iter().with_min_len(MIN_CHUNKS).map(f).collect();
    #[cfg(not(feature = "parallel"))]
    return (0..count).map(f).collect();
}
