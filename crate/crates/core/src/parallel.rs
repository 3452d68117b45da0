//! Data-parallel helpers. With the `parallel` feature these fan out over
//! rayon's pool; without it every call runs sequentially on the caller.

/// How independent work items are scheduled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

/// Maps `f` over `items`, preserving order.
pub fn map<T, R, F>(exec: Execution, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            items.par_iter().map(f).collect()
        }
        _ => items.iter().map(f).collect(),
    }
}

/// Applies `f(src, dst)` chunk-wise; chunks are independent.
pub(crate) fn zip_chunks<F>(exec: Execution, src: &[f64], dst: &mut [f64], chunk: usize, f: F)
where
    F: Fn(&[f64], &mut [f64]) + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            src.par_chunks(chunk)
                .zip(dst.par_chunks_mut(chunk))
                .for_each(|(s, d)| f(s, d));
        }
        _ => src.chunks(chunk).zip(dst.chunks_mut(chunk)).for_each(|(s, d)| f(s, d)),
    }
}
