//! Order-preserving map over independent jobs: rayon with the `parallel`
//! feature, a plain loop without it. Results are identical either way.

use crate::error::Result;

#[cfg(feature = "parallel")]
pub fn map<T, U, F>(items: &[T], f: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> Result<U> + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map<T, U, F>(items: &[T], f: F) -> Result<Vec<U>>
where
    F: Fn(&T) -> Result<U>,
{
    sequential(items, f)
}

/// Always-sequential variant, used for benchmarking against [`map`].
pub fn sequential<T, U, F>(items: &[T], f: F) -> Result<Vec<U>>
where
    F: Fn(&T) -> Result<U>,
{
    items.iter().map(f).collect()
}
