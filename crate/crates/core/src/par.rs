//! Data-parallel map with a sequential fallback.
//!
//! Results always come back in input order, so anything reduced from them is
//! identical across modes and worker counts.

/// Overrides the worker count. `1` forces sequential execution.
pub const WORKERS_ENV: &str = "DIFFJSCC_WORKERS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecutionMode {
    Sequential,
    /// The global rayon pool.
    #[default]
    Parallel,
    Workers(usize),
}

impl ExecutionMode {
    /// Reads [`WORKERS_ENV`]; falls back to the global pool.
    pub fn from_env() -> Self {
        match std::env::var(WORKERS_ENV)
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
        {
            Some(0) | None => ExecutionMode::Parallel,
            Some(1) => ExecutionMode::Sequential,
            Some(n) => ExecutionMode::Workers(n),
        }
    }

    pub fn is_parallel(&self) -> bool {
        cfg!(feature = "parallel") && !matches!(self, ExecutionMode::Sequential)
    }
}

/// `items.map(f)` in input order.
pub fn map_ordered<T, U, F>(mode: ExecutionMode, items: Vec<T>, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        match mode {
            ExecutionMode::Sequential => items.into_iter().map(f).collect(),
            ExecutionMode::Parallel => items.into_par_iter().map(f).collect(),
            ExecutionMode::Workers(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
                Ok(pool) => pool.install(|| items.into_par_iter().map(f).collect()),
                Err(_) => items.into_iter().map(f).collect(),
            },
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = mode;
        items.into_iter().map(f).collect()
    }
}
