//! Data-parallel helpers.
//!
//! Every hot loop that is embarrassingly parallel (per-sample gradients,
//! per-song generation and tokenization, per-song evaluation, candidate
//! resynthesis) goes through [`map_indexed`]. With the `parallel` feature
//! the work is spread over the rayon pool; without it, or when
//! [`Exec::Sequential`] is requested, the same closure runs in a plain loop.
//! Results are always returned in index order, so reductions performed by
//! the caller are bitwise identical across both paths.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    /// `true` when this build can actually run work on the rayon pool.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }
}

pub fn map_indexed<T, F>(n: usize, exec: Exec, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if exec == Exec::Parallel {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    let _ = exec;
    (0..n).map(f).collect()
}

pub fn map_slice<S, T, F>(items: &[S], exec: Exec, f: F) -> Vec<T>
where
    S: Sync,
    T: Send,
    F: Fn(&S) -> T + Sync + Send,
{
    map_indexed(items.len(), exec, |i| f(&items[i]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_paths_preserve_order() {
        let seq = map_indexed(100, Exec::Sequential, |i| i * i);
        let par = map_indexed(100, Exec::Parallel, |i| i * i);
        assert_eq!(seq, par);
        assert_eq!(seq[7], 49);
    }

    #[test]
    fn float_reduction_is_path_independent() {
        let f = |i: usize| ((i as f64) * 0.37).sin() / 3.0;
        let a: f64 = map_indexed(1000, Exec::Sequential, f).iter().sum();
        let b: f64 = map_indexed(1000, Exec::Parallel, f).iter().sum();
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
