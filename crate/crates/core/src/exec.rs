//! Order-preserving map over independent work items.
//!
//! With the `parallel` feature the work runs on a rayon pool; otherwise (or
//! with one worker) it runs inline. Outputs are returned in input order, so
//! callers that reduce them sequentially get identical bits for any worker count.

/// Environment variable consulted by [`Executor::from_env`].
pub const WORKERS_ENV: &str = "RADFED_WORKERS";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Executor {
    Sequential,
    /// `0` means rayon's default pool.
    #[cfg(feature = "parallel")]
    Parallel(usize),
}

impl Default for Executor {
    fn default() -> Self {
        #[cfg(feature = "parallel")]
        {
            Executor::Parallel(0)
        }
        #[cfg(not(feature = "parallel"))]
        {
            Executor::Sequential
        }
    }
}

impl Executor {
    pub fn with_workers(workers: usize) -> Self {
        if workers == 1 {
            return Executor::Sequential;
        }
        #[cfg(feature = "parallel")]
        {
            Executor::Parallel(workers)
        }
        #[cfg(not(feature = "parallel"))]
        {
            Executor::Sequential
        }
    }

    pub fn from_env() -> Self {
        match std::env::var(WORKERS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
            Some(n) => Self::with_workers(n),
            None => Self::default(),
        }
    }

    pub fn map<T, R, F>(&self, items: Vec<T>, f: F) -> Vec<R>
    where
        T: Send,
        R: Send,
        F: Fn(T) -> R + Send + Sync,
    {
        match *self {
            Executor::Sequential => items.into_iter().map(f).collect(),
            #[cfg(feature = "parallel")]
            Executor::Parallel(workers) => {
                use rayon::prelude::*;
                if workers == 0 {
                    items.into_par_iter().map(f).collect()
                } else {
                    match pool(workers) {
                        Some(pool) => pool.install(|| items.into_par_iter().map(f).collect()),
                        None => items.into_iter().map(f).collect(),
                    }
                }
            }
        }
    }
}

/// One pool per worker count, built on first use.
#[cfg(feature = "parallel")]
fn pool(workers: usize) -> Option<std::sync::Arc<rayon::ThreadPool>> {
    use std::collections::BTreeMap;
    use std::sync::{Arc, Mutex, OnceLock};
    static POOLS: OnceLock<Mutex<BTreeMap<usize, Arc<rayon::ThreadPool>>>> = OnceLock::new();
    let mut pools = POOLS.get_or_init(Default::default).lock().ok()?;
    if let Some(p) = pools.get(&workers) {
        return Some(p.clone());
    }
    let p = Arc::new(rayon::ThreadPoolBuilder::new().num_threads(workers).build().ok()?);
    pools.insert(workers, p.clone());
    Some(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_order() {
        let items: Vec<u64> = (0..200).collect();
        let seq = Executor::Sequential.map(items.clone(), |x| x * x);
        let par = Executor::with_workers(4).map(items, |x| x * x);
        assert_eq!(seq, par);
    }
}
