//! Data-parallel helpers with a sequential fallback.
//!
//! Work is always split into the same chunks regardless of the execution
//! mode, and results come back in chunk order, so sequential and parallel
//! runs produce bit-identical numbers.

/// How chunked work is scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    /// Uses the rayon pool when the `parallel` feature is enabled,
    /// otherwise behaves like [`Execution::Sequential`].
    #[default]
    Parallel,
}

impl Execution {
    /// Maps every item and collects the results in input order.
    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        match self {
            Execution::Sequential => items.iter().map(f).collect(),
            Execution::Parallel => actual::map(items, f),
        }
    }

    /// Maps over `0..n` and collects results in index order.
    pub fn map_range<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        match self {
            Execution::Sequential => (0..n).map(f).collect(),
            Execution::Parallel => actual::map_range(n, f),
        }
    }

    /// Applies `f` to each item mutably.
    pub fn for_each_mut<T, F>(self, items: &mut [T], f: F)
    where
        T: Send,
        F: Fn(usize, &mut T) + Sync + Send,
    {
        match self {
            Execution::Sequential => items.iter_mut().enumerate().for_each(|(i, t)| f(i, t)),
            Execution::Parallel => actual::for_each_mut(items, f),
        }
    }
}

#[cfg(feature = "parallel")]
mod actual {
    use rayon::prelude::*;

    pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        items.par_iter().map(f).collect()
    }

    pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        (0..n).into_par_iter().map(f).collect()
    }

    pub fn for_each_mut<T, F>(items: &mut [T], f: F)
    where
        T: Send,
        F: Fn(usize, &mut T) + Sync + Send,
    {
        items.par_iter_mut().enumerate().for_each(|(i, t)| f(i, t))
    }
}

#[cfg(not(feature = "parallel"))]
mod actual {
    pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
    where
        F: Fn(&T) -> R,
    {
        items.iter().map(f).collect()
    }

    pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
    where
        F: Fn(usize) -> R,
    {
        (0..n).map(f).collect()
    }

    pub fn for_each_mut<T, F>(items: &mut [T], f: F)
    where
        F: Fn(usize, &mut T),
    {
        items.iter_mut().enumerate().for_each(|(i, t)| f(i, t))
    }
}
