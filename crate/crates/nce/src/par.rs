//! Parallel-loop dispatch. With the `parallel` feature (default) the hot
//! loops fan out over rayon; without it they run sequentially. Both lanes
//! produce bit-identical results because each closure owns a disjoint output
//! chunk and accumulates in a fixed order within it.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Apply `f(index, chunk)` to consecutive `chunk_len` slices of `buf`.
pub fn for_each_chunk_mut<T, F>(buf: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    assert!(chunk_len > 0);
    #[cfg(feature = "parallel")]
    {
        buf.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        for (i, c) in buf.chunks_mut(chunk_len).enumerate() {
            f(i, c);
        }
    }
}

/// Fill each element of `buf` with `f(index)`.
pub fn fill_indexed<T, F>(buf: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        buf.par_iter_mut().enumerate().for_each(|(i, v)| *v = f(i));
    }
    #[cfg(not(feature = "parallel"))]
    {
        for (i, v) in buf.iter_mut().enumerate() {
            *v = f(i);
        }
    }
}

/// Configure the global rayon pool size. Call once at process start; later
/// calls are ignored (rayon pins the pool after first use).
pub fn set_thread_count(threads: usize) {
    #[cfg(feature = "parallel")]
    {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
    }
}

/// Thread count the compute lanes actually use, for recording in run metadata.
pub fn current_thread_count() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}
