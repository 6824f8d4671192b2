//! Data-parallel maps with a sequential fallback.
//!
//! Results are always returned in input order, and callers reduce them in
//! that order, so both modes produce bit-identical values.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    #[default]
    Parallel,
    Sequential,
}

impl Execution {
    /// Whether work actually fans out across threads.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

pub fn map_range<R, F>(exec: Execution, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

pub fn map<T, R, F>(exec: Execution, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    map_range(exec, items.len(), |i| f(&items[i]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree_and_keep_order() {
        let f = |i: usize| (0..=i).map(|k| (k as f64).sin()).sum::<f64>();
        let a = map_range(Execution::Parallel, 200, f);
        let b = map_range(Execution::Sequential, 200, f);
        assert_eq!(a, b);
        assert_eq!(map(Execution::Parallel, &[3, 1, 2], |&x| x * 10), vec![30, 10, 20]);
    }
}
