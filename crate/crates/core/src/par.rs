//! Thread fan-out for the trainer and deterministic reductions for eval.
//!
//! With the `parallel` feature, workers run on a rayon pool and reductions
//! fan out over chunks; without it, the same code runs sequentially in
//! worker order. Results of reductions do not depend on thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Runs `P` logical workers per epoch.
pub struct WorkerPool {
    workers: usize,
    #[cfg(feature = "parallel")]
    pool: Option<rayon::ThreadPool>,
}

impl WorkerPool {
    pub fn new(workers: usize) -> Result<Self> {
        if workers == 0 {
            return Err(Error::InvalidConfig("worker count must be at least 1".into()));
        }
        #[cfg(feature = "parallel")]
        let pool = if workers > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(workers)
                    .thread_name(|i| format!("cmtf-worker-{i}"))
                    .build()
                    .map_err(|e| Error::InvalidConfig(format!("cannot start worker pool: {e}")))?,
            )
        } else {
            None
        };
        Ok(WorkerPool {
            workers,
            #[cfg(feature = "parallel")]
            pool,
        })
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    /// Calls `f(w)` once for every worker `w` and waits for all of them.
    pub fn run<F>(&self, f: F)
    where
        F: Fn(usize) + Sync,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            let f = &f;
            pool.scope(|s| {
                for w in 0..self.workers {
                    s.spawn(move |_| f(w));
                }
            });
            return;
        }
        (0..self.workers).for_each(f);
    }
}

const SUM_CHUNK: usize = 4096;

/// Pairwise (cascade) summation.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 16 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// `Σ_{i<n} f(i)` with a fixed chunking, so the rounding is the same for
/// any number of threads.
pub fn chunked_sum<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    let chunk_sum = |c: usize| {
        let lo = c * SUM_CHUNK;
        let hi = (lo + SUM_CHUNK).min(n);
        let terms: Vec<f64> = (lo..hi).map(&f).collect();
        pairwise_sum(&terms)
    };
    let chunks = n.div_ceil(SUM_CHUNK);
    #[cfg(feature = "parallel")]
    let partial: Vec<f64> = (0..chunks).into_par_iter().map(chunk_sum).collect();
    #[cfg(not(feature = "parallel"))]
    let partial: Vec<f64> = (0..chunks).map(chunk_sum).collect();
    pairwise_sum(&partial)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[test]
    fn every_worker_runs_once() {
        for p in [1, 3, 8] {
            let pool = WorkerPool::new(p).unwrap();
            let hits: Vec<AtomicUsize> = (0..p).map(|_| AtomicUsize::new(0)).collect();
            pool.run(|w| {
                hits[w].fetch_add(1, Ordering::Relaxed);
            });
            assert!(hits.iter().all(|h| h.load(Ordering::Relaxed) == 1));
        }
        assert!(WorkerPool::new(0).is_err());
    }

    #[test]
    fn chunked_sum_is_exact_on_integers_and_reproducible() {
        let n = 10_007;
        assert_eq!(chunked_sum(n, |i| i as f64), (n * (n - 1) / 2) as f64);
        let f = |i: usize| ((i as f64) * 0.37).sin() * 1e-3;
        assert_eq!(chunked_sum(50_000, f).to_bits(), chunked_sum(50_000, f).to_bits());
        assert_eq!(chunked_sum(0, f), 0.0);
    }
}
