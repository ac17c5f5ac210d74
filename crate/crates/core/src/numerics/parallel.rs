//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) the helpers dispatch to rayon; the
//! process-wide [`Mode`] switch forces the sequential path at runtime so both
//! can be compared in one binary. Without the feature every helper is a plain
//! loop. Results never depend on the mode: each output element is produced by
//! exactly one closure call in a fixed order of arithmetic.

use std::sync::atomic::{AtomicBool, Ordering};

/// Work items below this many multiply-adds stay on the calling thread.
#[cfg_attr(not(feature = "parallel"), allow(dead_code))]
const MIN_PARALLEL_WORK: usize = 1 << 15;

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Sequential,
    Parallel,
}

pub fn set_mode(mode: Mode) {
    FORCE_SEQUENTIAL.store(mode == Mode::Sequential, Ordering::SeqCst);
}

pub fn mode() -> Mode {
    if cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.load(Ordering::SeqCst) {
        Mode::Parallel
    } else {
        Mode::Sequential
    }
}

/// Caps the global rayon pool. Only the first call has an effect.
pub fn init_threads(threads: usize) {
    #[cfg(feature = "parallel")]
    {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
}

/// Calls `f(row_index, row)` for every `cols`-wide row of `out`.
pub fn for_each_row<F>(out: &mut [f64], cols: usize, work: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if cols == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if work >= MIN_PARALLEL_WORK && mode() == Mode::Parallel {
        use rayon::prelude::*;
        out.par_chunks_mut(cols).enumerate().for_each(|(i, row)| f(i, row));
        return;
    }
    let _ = work;
    for (i, row) in out.chunks_mut(cols).enumerate() {
        f(i, row);
    }
}

/// Maps `f` over `0..n`, preserving index order in the output.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode() == Mode::Parallel {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Fallible variant of [`map_indexed`]; the first error in index order wins.
pub fn try_map_indexed<T, E, F>(n: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync + Send,
{
    map_indexed(n, f).into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let v = map_indexed(1000, |i| i * 2);
        assert!(v.iter().enumerate().all(|(i, &x)| x == 2 * i));
    }

    #[test]
    fn rows_visited_once() {
        let mut out = vec![0.0; 64 * 1024];
        for_each_row(&mut out, 64, usize::MAX, |i, row| {
            for v in row.iter_mut() {
                *v += i as f64;
            }
        });
        assert_eq!(out[64 * 5 + 3], 5.0);
        assert_eq!(out[64 * 1023], 1023.0);
    }
}
