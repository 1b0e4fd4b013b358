//! Data-parallel map helpers with a sequential fallback.
//!
//! With the default `parallel` feature, [`pmap`] fans out over rayon's global
//! pool; without it, everything runs on the caller's thread. Both paths
//! collect results in input order, so callers see identical output regardless
//! of feature flags or worker counts. [`pmap_serial`] is always sequential and
//! exists so benchmarks can compare the two paths in one build.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `items`, in parallel when the `parallel` feature is enabled.
/// Output order always matches input order.
pub fn pmap<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Sequential map with the same signature as [`pmap`].
pub fn pmap_serial<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

/// Maps `f` over an index range, in parallel when enabled; ordered output.
pub fn pmap_range<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pmap_preserves_order() {
        let xs: Vec<u64> = (0..1000).collect();
        let doubled = pmap(&xs, |x| x * 2);
        let serial = pmap_serial(&xs, |x| x * 2);
        assert_eq!(doubled, serial);
    }

    #[test]
    fn pmap_range_matches_direct() {
        let got = pmap_range(64, |i| i * i);
        let want: Vec<usize> = (0..64).map(|i| i * i).collect();
        assert_eq!(got, want);
    }
}
