//! Serial or thread-pool execution with order-preserving results.
//!
//! Work items are always reduced by the caller in index order, so both modes
//! produce bitwise-identical results; the parallel mode only changes speed.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Parallelism {
    #[default]
    Serial,
    Threads(usize),
}

impl Parallelism {
    pub fn from_threads(n: usize) -> Self {
        if n <= 1 {
            Parallelism::Serial
        } else {
            Parallelism::Threads(n)
        }
    }

    /// Maps `f` over `0..n`, returning results in index order.
    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            Parallelism::Serial => (0..n).map(f).collect(),
            Parallelism::Threads(threads) => {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build()
                    .expect("thread pool");
                pool.install(|| (0..n).into_par_iter().map(f).collect())
            }
        }
    }
}
