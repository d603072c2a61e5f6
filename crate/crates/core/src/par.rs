//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (on by default) the helpers dispatch to rayon;
//! without it every call runs on the calling thread. Each work item writes
//! only its own output slot, so results are identical under both modes.

/// Execution mode for the data-parallel kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    /// Uses rayon when the `parallel` feature is enabled, otherwise sequential.
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

/// Below this many scalar operations a kernel stays on the current thread.
pub const PAR_THRESHOLD: usize = 1 << 15;

impl Exec {
    /// Picks sequential for small workloads regardless of mode.
    pub fn for_work(self, flops: usize) -> Exec {
        if flops < PAR_THRESHOLD {
            Exec::Sequential
        } else {
            self
        }
    }
}

/// Fill `out` row by row: `f(row_index, row_slice)`. `out.len()` must be a
/// multiple of `row_len`.
pub fn fill_rows<F>(exec: Exec, out: &mut [f64], row_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if row_len == 0 {
        return;
    }
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            use rayon::prelude::*;
            out.par_chunks_mut(row_len).enumerate().for_each(|(i, row)| f(i, row));
        }
        _ => {
            for (i, row) in out.chunks_mut(row_len).enumerate() {
                f(i, row);
            }
        }
    }
}

/// Ordered map over `0..n`; output order is index order in both modes.
pub fn map_indices<T, F>(exec: Exec, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}
