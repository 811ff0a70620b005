//! Batch dispatch: data-parallel via rayon, or sequential.
//!
//! The `parallel` cargo feature (on by default) enables rayon; without it the
//! same helpers run plain loops. At runtime a thread can additionally force
//! sequential execution with [`sequential`], which the CLI `--sequential`
//! flag and the benchmarks use. Results are returned in index order in every
//! mode, and callers reduce them in index order, so outputs are bit-identical
//! regardless of dispatch.

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use std::cell::Cell;

thread_local! {
    static FORCE_SEQUENTIAL: Cell<bool> = const { Cell::new(false) };
}

/// Whether batch helpers on this thread will actually fan out.
pub fn parallel_enabled() -> bool {
    #[cfg(feature = "parallel")]
    {
        !FORCE_SEQUENTIAL.with(|f| f.get())
    }
    #[cfg(not(feature = "parallel"))]
    {
        false
    }
}

/// Run `f` with parallel dispatch disabled on the current thread (restores
/// the previous mode afterwards, also on panic).
pub fn sequential<T>(f: impl FnOnce() -> T) -> T {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            FORCE_SEQUENTIAL.with(|flag| flag.set(self.0));
        }
    }
    let _restore = FORCE_SEQUENTIAL.with(|flag| Restore(flag.replace(true)));
    f()
}

/// Map `f` over `0..n`, returning results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Like [`map_indexed`] but for fallible work. The error reported is always
/// the one at the lowest index, independent of scheduling.
pub fn try_map_indexed<T, E, F>(n: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync + Send,
{
    let results: Vec<Result<T, E>> = map_indexed(n, f);
    let mut out = Vec::with_capacity(n);
    for r in results {
        out.push(r?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn results_arrive_in_index_order() {
        let v = map_indexed(100, |i| i * 3);
        assert_eq!(v, (0..100).map(|i| i * 3).collect::<Vec<_>>());
    }

    #[test]
    fn sequential_scope_toggles_and_restores() {
        let before = parallel_enabled();
        let inside = sequential(|| parallel_enabled());
        assert!(!inside);
        assert_eq!(parallel_enabled(), before);
    }

    #[test]
    fn parallel_and_sequential_agree_bitwise() {
        // Mixed-magnitude floats: any reduction-order change would show up.
        let work = |i: usize| ((i as f64) * 1e-3).sin() * 10f64.powi((i % 7) as i32 - 3);
        let par: Vec<f64> = map_indexed(512, work);
        let seq: Vec<f64> = sequential(|| map_indexed(512, work));
        let sum_par = par.iter().fold(0.0, |a, b| a + b);
        let sum_seq = seq.iter().fold(0.0, |a, b| a + b);
        assert_eq!(sum_par.to_bits(), sum_seq.to_bits());
    }

    #[test]
    fn try_map_reports_lowest_index_error() {
        let r: Result<Vec<usize>, usize> =
            try_map_indexed(64, |i| if i == 10 || i == 50 { Err(i) } else { Ok(i) });
        assert_eq!(r.unwrap_err(), 10);
    }
}
