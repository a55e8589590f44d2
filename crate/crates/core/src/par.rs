//! Order-preserving data-parallel helpers; sequential without the
//! `parallel` feature.

use crate::error::Result;

#[cfg(feature = "parallel")]
pub fn map_indexed<T: Sync, U: Send>(items: &[T], f: impl Fn(usize, &T) -> Result<U> + Sync + Send) -> Result<Vec<U>> {
    use rayon::prelude::*;
    items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T: Sync, U: Send>(items: &[T], f: impl Fn(usize, &T) -> Result<U> + Sync + Send) -> Result<Vec<U>> {
    items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

/// Caps the global worker pool. Has no effect after the pool has started
/// or without the `parallel` feature.
pub fn init_threads(n: usize) {
    #[cfg(feature = "parallel")]
    {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = n;
}
