//! Execution strategy for the embarrassingly parallel inner loops:
//! per-agent MPC solves, per-inverter fits, and scenario sweeps.
//!
//! The `parallel` feature (on by default) backs `Parallelism::default()`
//! with rayon. `Sequential` is always available so benchmarks can compare
//! both paths in one build. Results are collected in index order, so the
//! outputs are identical regardless of strategy.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parallelism {
    Sequential,
    #[cfg(feature = "parallel")]
    Rayon,
}

impl Default for Parallelism {
    #[cfg(feature = "parallel")]
    fn default() -> Self {
        Parallelism::Rayon
    }
    #[cfg(not(feature = "parallel"))]
    fn default() -> Self {
        Parallelism::Sequential
    }
}

/// Map `f` over `0..n`, honoring the requested strategy.
pub fn map_indexed<T, F>(par: Parallelism, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match par {
        Parallelism::Sequential => (0..n).map(f).collect(),
        #[cfg(feature = "parallel")]
        Parallelism::Rayon => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
    }
}
