//! Data-parallel map helpers with a sequential fallback.
//!
//! Every parallel loop in the crate goes through `map_indexed`, which preserves input
//! order in its output. Results are therefore byte-identical whether the `parallel`
//! feature is enabled or not; parallelism never changes reduction order.

/// Maps `f` over `items`, returning results in input order.
#[cfg(feature = "parallel")]
pub fn map_indexed<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync + Send,
{
    use rayon::prelude::*;
    items.into_par_iter().map(f).collect()
}

/// Sequential fallback used when the `parallel` feature is disabled.
#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    F: Fn(T) -> U,
{
    items.into_iter().map(f).collect()
}

/// Sequential map with the same signature, kept available so benches can compare
/// both strategies in a single build.
pub fn map_sequential<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    F: Fn(T) -> U,
{
    items.into_iter().map(f).collect()
}
