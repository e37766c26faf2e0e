//! Thin indirection over rayon.
//!
//! Every parallel site in the crate routes through these helpers so the
//! `parallel` feature can be dropped for a fully sequential build. Work is
//! always split per output row or per item; each element is produced by
//! exactly one task with a fixed inner summation order, so parallel and
//! sequential builds return bitwise-identical results.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Apply `f` to every `cols`-wide row of `out`, in parallel when allowed.
#[cfg(feature = "parallel")]
pub(crate) fn for_each_row<F>(out: &mut [f64], cols: usize, parallel: bool, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if parallel && cols > 0 {
        out.par_chunks_mut(cols)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    } else {
        for (i, row) in out.chunks_mut(cols.max(1)).enumerate() {
            f(i, row);
        }
    }
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn for_each_row<F>(out: &mut [f64], cols: usize, _parallel: bool, f: F)
where
    F: Fn(usize, &mut [f64]),
{
    for (i, row) in out.chunks_mut(cols.max(1)).enumerate() {
        f(i, row);
    }
}

/// Map `0..n` to a vector, in parallel when `heavy` and the feature is on.
#[cfg(feature = "parallel")]
pub(crate) fn map_indexed<T, F>(n: usize, heavy: bool, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    if heavy && n > 1 {
        (0..n).into_par_iter().map(f).collect()
    } else {
        (0..n).map(f).collect()
    }
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn map_indexed<T, F>(n: usize, _heavy: bool, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}
