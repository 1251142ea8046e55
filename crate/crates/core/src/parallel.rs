//! Order-preserving parallel map. Thread count follows the global rayon
//! pool, which the CLI sizes from `ATTRGATE_THREADS`.

use rayon::prelude::*;

use crate::error::Result;

/// Applies `f` to every item in parallel and returns results in input order.
/// The first error (by input index) wins.
pub fn map_ordered<T, U, F>(items: &[T], f: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> Result<U> + Sync + Send,
{
    items.par_iter().map(&f).collect::<Vec<_>>().into_iter().collect()
}
