//! Data-parallel helpers. With the `parallel` feature the maps fan out over
//! rayon; without it they run sequentially. Both paths produce results in
//! input order and reductions happen after collection, so outputs are
//! bitwise identical regardless of worker count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Configure the global worker pool. `0` keeps the library default.
/// Calling it again (or after the pool is already running) is a no-op.
pub fn init_workers(workers: usize) {
    #[cfg(feature = "parallel")]
    {
        if workers > 0 {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build_global();
        }
    }
    #[cfg(not(feature = "parallel"))]
    let _ = workers;
}

/// Order-preserving map over items.
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

/// Order-preserving fallible map; the first error in input order wins.
pub fn try_map<T, R, E, F>(items: &[T], f: F) -> Result<Vec<R>, E>
where
    T: Sync,
    R: Send,
    E: Send,
    F: Fn(&T) -> Result<R, E> + Sync + Send,
{
    let results: Vec<Result<R, E>> = {
        #[cfg(feature = "parallel")]
        {
            items.par_iter().map(f).collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            items.iter().map(f).collect()
        }
    };
    results.into_iter().collect()
}

/// Sequential reference path, always available (used by the benchmarks to
/// compare against the parallel map).
pub fn map_sequential<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}
