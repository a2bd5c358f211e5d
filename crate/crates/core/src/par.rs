//! Execution strategy for data-parallel batch work.
//!
//! Every batch entry point takes an [`Exec`]. Results always come back in
//! input order, so reports are identical whichever strategy ran them.

/// How a batch of independent items is processed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Exec {
    /// Plain in-order iteration on the calling thread.
    Sequential,
    /// rayon work stealing on the current pool. Without the `parallel`
    /// feature this behaves exactly like [`Exec::Sequential`].
    #[default]
    Parallel,
}

impl Exec {
    /// Whether this strategy actually fans out in the current build.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }

    /// Maps `f` over `items`, returning results in input order.
    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(usize, &T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Exec::Parallel {
            use rayon::prelude::*;
            return items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect();
        }
        items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
    }

    /// Maps `f` over `0..n`, returning results in index order.
    pub fn map_range<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Exec::Parallel {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }

    /// Like [`Exec::map`] but stops at the first error (in input order).
    pub fn try_map<T, R, E, F>(self, items: &[T], f: F) -> Result<Vec<R>, E>
    where
        T: Sync,
        R: Send,
        E: Send,
        F: Fn(usize, &T) -> Result<R, E> + Sync + Send,
    {
        self.map(items, f).into_iter().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_strategies_preserve_order() {
        let items: Vec<u64> = (0..1000).collect();
        let seq = Exec::Sequential.map(&items, |i, v| v * 3 + i as u64);
        let par = Exec::Parallel.map(&items, |i, v| v * 3 + i as u64);
        assert_eq!(seq, par);
        assert_eq!(Exec::Parallel.map_range(10, |i| i * i)[9], 81);
    }

    #[test]
    fn try_map_reports_first_error() {
        let items = [1, 2, 3, 4];
        let r: Result<Vec<i32>, usize> =
            Exec::Parallel.try_map(&items, |i, v| if *v >= 3 { Err(i) } else { Ok(*v) });
        assert_eq!(r, Err(2));
    }
}
