//! Execution strategy for embarrassingly parallel per-scenario work.
//!
//! `map_indexed` preserves input order, so results are deterministic
//! regardless of the strategy. The `parallel` feature gates the rayon
//! dependency; without it `Strategy::Parallel` falls back to sequential.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Strategy {
    Sequential,
    #[default]
    Parallel,
}

impl Strategy {
    /// Apply `f` to every item, collecting outputs in input order.
    pub fn map<T, U, F>(&self, items: Vec<T>, f: F) -> Vec<U>
    where
        T: Send,
        U: Send,
        F: Fn(T) -> U + Sync + Send,
    {
        match self {
            Strategy::Sequential => items.into_iter().map(f).collect(),
            #[cfg(feature = "parallel")]
            Strategy::Parallel => items.into_par_iter().map(f).collect(),
            #[cfg(not(feature = "parallel"))]
            Strategy::Parallel => items.into_iter().map(f).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_matches_sequential_order() {
        let items: Vec<u64> = (0..257).collect();
        let f = |x: u64| x.wrapping_mul(6364136223846793005).rotate_left(17);
        let seq = Strategy::Sequential.map(items.clone(), f);
        let par = Strategy::Parallel.map(items, f);
        assert_eq!(seq, par);
    }
}
