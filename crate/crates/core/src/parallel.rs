//! Row-partitioned parallelism with a sequential fallback.
//!
//! Every parallel loop in this crate splits work into disjoint output-row
//! chunks; per-element accumulation order never depends on the thread
//! count, so the `parallel` feature changes speed, not results.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this many scalar ops a parallel dispatch costs more than it saves.
pub(crate) const PAR_THRESHOLD: usize = 1 << 15;

/// Run `f(row_index, row_slice)` over every `row_len`-sized chunk of `out`.
///
/// Parallel when the feature is enabled and `work_hint` (total scalar ops)
/// is large enough; always sequential otherwise.
pub(crate) fn for_each_row<F>(out: &mut [f32], row_len: usize, work_hint: usize, f: F)
where
    F: Fn(usize, &mut [f32]) + Sync + Send,
{
    debug_assert!(row_len > 0 && out.len() % row_len == 0);
    #[cfg(feature = "parallel")]
    {
        if work_hint >= PAR_THRESHOLD {
            out.par_chunks_mut(row_len)
                .enumerate()
                .for_each(|(i, row)| f(i, row));
            return;
        }
    }
    let _ = work_hint;
    for (i, row) in out.chunks_mut(row_len).enumerate() {
        f(i, row);
    }
}

/// Sequential twin of [`for_each_row`], kept callable regardless of
/// features so benchmarks can compare the two paths in one build.
pub(crate) fn for_each_row_seq<F>(out: &mut [f32], row_len: usize, f: F)
where
    F: Fn(usize, &mut [f32]),
{
    debug_assert!(row_len > 0 && out.len() % row_len == 0);
    for (i, row) in out.chunks_mut(row_len).enumerate() {
        f(i, row);
    }
}

/// Map `f` over `0..n` and sum the results (used for sharded evaluation).
pub(crate) fn sum_over<F>(n: usize, work_hint: usize, f: F) -> usize
where
    F: Fn(usize) -> usize + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if work_hint >= PAR_THRESHOLD {
            return (0..n).into_par_iter().map(f).sum();
        }
    }
    let _ = work_hint;
    (0..n).map(f).sum()
}
