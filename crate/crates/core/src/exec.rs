//! Bounded worker pool for per-item scorer calls.
//!
//! The optimizer and evaluator fan per-item work out over a configurable
//! number of threads but must stay bit-deterministic: results are always
//! collected in input order, and the first error in input order wins no
//! matter which worker hit it first.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Runs closures over inputs either inline (`workers <= 1`) or on a private
/// rayon pool of exactly `workers` threads.
pub struct Runner {
    pool: Option<rayon::ThreadPool>,
}

impl Runner {
    pub fn new(workers: usize) -> Result<Self> {
        if workers <= 1 {
            return Ok(Runner { pool: None });
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Config(format!("failed to build worker pool: {e}")))?;
        Ok(Runner { pool: Some(pool) })
    }

    pub fn workers(&self) -> usize {
        self.pool.as_ref().map_or(1, |p| p.current_num_threads())
    }

    /// Map `f` over `inputs`, preserving input order in the output.
    ///
    /// Every input is attempted (no short-circuit), so downstream call
    /// accounting does not depend on the worker count; if any call failed,
    /// the error earliest in input order is returned.
    pub fn try_map<T, U, F>(&self, inputs: Vec<T>, f: F) -> Result<Vec<U>>
    where
        T: Send,
        U: Send,
        F: Fn(T) -> Result<U> + Sync + Send,
    {
        let results: Vec<Result<U>> = match &self.pool {
            None => inputs.into_iter().map(f).collect(),
            Some(pool) => pool.install(|| inputs.into_par_iter().map(f).collect()),
        };
        results.into_iter().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_input_order_under_parallelism() {
        let runner = Runner::new(8).unwrap();
        assert_eq!(runner.workers(), 8);
        let inputs: Vec<u64> = (0..200).collect();
        let out = runner
            .try_map(inputs.clone(), |i| {
                // Stagger completion so out-of-order finishes are likely.
                std::thread::sleep(std::time::Duration::from_micros(200 - i));
                Ok(i * 2)
            })
            .unwrap();
        let expect: Vec<u64> = inputs.iter().map(|i| i * 2).collect();
        assert_eq!(out, expect);
    }

    #[test]
    fn single_worker_runs_inline() {
        let runner = Runner::new(1).unwrap();
        assert_eq!(runner.workers(), 1);
        let out = runner.try_map(vec![1, 2, 3], |i| Ok(i + 1)).unwrap();
        assert_eq!(out, vec![2, 3, 4]);
    }

    #[test]
    fn first_error_in_input_order_wins() {
        for workers in [1, 4] {
            let runner = Runner::new(workers).unwrap();
            let err = runner
                .try_map((0..100).collect::<Vec<u64>>(), |i| {
                    if i == 17 || i == 80 {
                        Err(Error::MockBackend(format!("boom {i}")))
                    } else {
                        Ok(i)
                    }
                })
                .unwrap_err();
            match err {
                Error::MockBackend(msg) => assert_eq!(msg, "boom 17"),
                other => panic!("unexpected error {other:?}"),
            }
        }
    }
}
