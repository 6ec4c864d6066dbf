//! Thin switch between rayon data-parallel loops and sequential fallbacks.
//!
//! Both paths compute each output element in the same order within its
//! row, so results are bitwise identical regardless of thread count.

/// Apply `f` to every `row_len`-sized chunk of `buf`, passing the chunk index.
#[cfg(feature = "parallel")]
pub fn for_each_row<T, F>(buf: &mut [T], row_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    use rayon::prelude::*;
    debug_assert!(row_len > 0 && buf.len() % row_len == 0);
    buf.par_chunks_mut(row_len)
        .enumerate()
        .for_each(|(i, row)| f(i, row));
}

#[cfg(not(feature = "parallel"))]
pub fn for_each_row<T, F>(buf: &mut [T], row_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    debug_assert!(row_len > 0 && buf.len() % row_len == 0);
    for (i, row) in buf.chunks_mut(row_len).enumerate() {
        f(i, row);
    }
}

/// Run `f` pinned to a single worker thread. Used for timed benchmark
/// regions so latency ratios are not skewed by the pool size.
#[cfg(feature = "parallel")]
pub fn run_single_threaded<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .expect("single-thread pool");
    pool.install(f)
}

#[cfg(not(feature = "parallel"))]
pub fn run_single_threaded<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    f()
}

/// Number of worker threads the crate will use for data-parallel loops.
#[cfg(feature = "parallel")]
pub fn worker_threads() -> usize {
    rayon::current_num_threads()
}

#[cfg(not(feature = "parallel"))]
pub fn worker_threads() -> usize {
    1
}

/// Cap the global worker pool; honored once per process, before any
/// parallel work runs. Returns false when the cap could not be applied.
#[cfg(feature = "parallel")]
pub fn configure_threads(n: usize) -> bool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n.max(1))
        .build_global()
        .is_ok()
}

#[cfg(not(feature = "parallel"))]
pub fn configure_threads(_n: usize) -> bool {
    true
}
