//! Data-parallel map over independent work items.
//!
//! With the `parallel` feature (default) the work runs on the rayon pool;
//! without it, the same calls run sequentially. Results preserve input
//! order either way, so output is identical across both modes.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub fn map_collect<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
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

/// Always-sequential variant, kept available as the benchmark baseline.
pub fn map_collect_seq<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

pub fn parallelism_enabled() -> bool {
    cfg!(feature = "parallel")
}

/// Cap the worker pool. Returns false when the pool was already
/// initialized or the build is sequential.
pub fn configure_threads(threads: usize) -> bool {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().is_ok()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_agree() {
        let items: Vec<u64> = (0..1000).collect();
        let f = |x: &u64| x * x + 1;
        assert_eq!(map_collect(&items, f), map_collect_seq(&items, f));
    }
}
