//! Order-preserving data-parallel map.
//!
//! With the `parallel` feature the map runs on the rayon pool; without it,
//! sequentially. Output order always matches input order, so callers that
//! fold the results in order get identical floating-point sums either way.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub fn map_indexed<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_indexed_seq(items, f)
    }
}

pub fn map_indexed_seq<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(usize, &T) -> R,
{
    items.iter().enumerate().map(|(i, x)| f(i, x)).collect()
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
