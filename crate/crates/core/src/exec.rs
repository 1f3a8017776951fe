//! Data-parallel helpers. With the `parallel` feature the work is spread
//! over a rayon pool; without it, or with [`Execution::Sequential`], the
//! same closures run in order on the calling thread. Results always come
//! back in input order so downstream reductions stay deterministic.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Environment variable that caps the worker count of the global pool.
pub const WORKERS_ENV: &str = "STKD_WORKERS";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Execution {
    #[default]
    Parallel,
    Sequential,
}

impl Execution {
    /// `Parallel` degrades to `Sequential` when built without rayon.
    pub fn effective(self) -> Execution {
        if cfg!(feature = "parallel") {
            self
        } else {
            Execution::Sequential
        }
    }

    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        match self.effective() {
            #[cfg(feature = "parallel")]
            Execution::Parallel => items.par_iter().map(f).collect(),
            _ => items.iter().map(f).collect(),
        }
    }

    pub fn map_indexed<R, F>(self, len: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        match self.effective() {
            #[cfg(feature = "parallel")]
            Execution::Parallel => (0..len).into_par_iter().map(f).collect(),
            _ => (0..len).map(f).collect(),
        }
    }
}

/// Sizes the global rayon pool from [`WORKERS_ENV`] if set. Safe to call
/// more than once; only the first call has an effect.
pub fn init_workers() {
    #[cfg(feature = "parallel")]
    if let Some(n) = std::env::var(WORKERS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree() {
        let xs: Vec<u64> = (0..1000).collect();
        let a = Execution::Parallel.map(&xs, |x| x * x);
        let b = Execution::Sequential.map(&xs, |x| x * x);
        assert_eq!(a, b);
        assert_eq!(Execution::Parallel.map_indexed(5, |i| i), [0, 1, 2, 3, 4]);
    }
}
