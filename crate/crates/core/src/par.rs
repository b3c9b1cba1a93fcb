//! Worker-pool abstraction.
//!
//! All data-parallel loops in the crate go through [`Parallelism`] so that a
//! single `--workers` flag controls threading everywhere. Results are always
//! collected in input order and every work item derives its own RNG stream
//! from its index, so the output is bit-identical whether the map runs on one
//! thread or many, and whether the `parallel` feature is compiled in or not.

#[cfg(feature = "parallel")]
use rayon::prelude::*;
#[cfg(feature = "parallel")]
use std::sync::Arc;

/// Thread-count policy for data-parallel maps.
#[derive(Clone, Default)]
pub struct Parallelism {
    #[cfg(feature = "parallel")]
    pool: Option<Arc<rayon::ThreadPool>>,
}

impl std::fmt::Debug for Parallelism {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Parallelism")
            .field("workers", &self.workers())
            .finish()
    }
}

impl Parallelism {
    /// Strictly sequential execution.
    pub fn sequential() -> Self {
        Self::with_workers(1)
    }

    /// Execution with `n` worker threads. `n == 1` runs inline without a
    /// pool; `n == 0` means "use all available cores".
    pub fn with_workers(n: usize) -> Self {
        #[cfg(feature = "parallel")]
        {
            if n == 1 {
                return Self { pool: None };
            }
            let mut builder = rayon::ThreadPoolBuilder::new();
            if n > 0 {
                builder = builder.num_threads(n);
            }
            let pool = builder.build().expect("building worker pool");
            Self {
                pool: Some(Arc::new(pool)),
            }
        }
        #[cfg(not(feature = "parallel"))]
        {
            let _ = n;
            Self {}
        }
    }

    /// Number of threads this policy will use.
    pub fn workers(&self) -> usize {
        #[cfg(feature = "parallel")]
        {
            self.pool.as_ref().map_or(1, |p| p.current_num_threads())
        }
        #[cfg(not(feature = "parallel"))]
        {
            1
        }
    }

    /// Order-preserving indexed map: `out[i] = f(i, &items[i])`.
    pub fn map_indexed<T, U, F>(&self, items: &[T], f: F) -> Vec<U>
    where
        T: Sync,
        U: Send,
        F: Fn(usize, &T) -> U + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            return pool.install(|| {
                items
                    .par_iter()
                    .enumerate()
                    .map(|(i, item)| f(i, item))
                    .collect()
            });
        }
        items.iter().enumerate().map(|(i, item)| f(i, item)).collect()
    }

    /// Order-preserving map over an index range: `out[i] = f(i)`.
    pub fn map_range<U, F>(&self, n: usize, f: F) -> Vec<U>
    where
        U: Send,
        F: Fn(usize) -> U + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            return pool.install(|| (0..n).into_par_iter().map(&f).collect());
        }
        (0..n).map(f).collect()
    }
}
