//! Data-parallel helpers.
//!
//! With the `parallel` feature the batch loops fan out over rayon; without it
//! (or after [`set_enabled(false)`](set_enabled)) they run sequentially. Both
//! paths produce identical results: every item is computed independently and
//! results are collected in input order, so reductions downstream stay
//! order-fixed.

use std::sync::atomic::{AtomicBool, Ordering};

static ENABLED: AtomicBool = AtomicBool::new(true);

/// Environment variable consulted for the default worker count.
pub const WORKERS_ENV: &str = "DEPTHSSL_WORKERS";

/// Toggle the parallel path at runtime (no-op without the `parallel` feature).
pub fn set_enabled(on: bool) {
    ENABLED.store(on, Ordering::SeqCst);
}

pub fn enabled() -> bool {
    cfg!(feature = "parallel") && ENABLED.load(Ordering::SeqCst)
}

/// Configure the global worker pool from `DEPTHSSL_WORKERS` or an explicit count.
/// Returns the worker count in effect.
pub fn init_workers(explicit: Option<usize>) -> usize {
    let requested = explicit.or_else(|| {
        std::env::var(WORKERS_ENV)
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
    });
    #[cfg(feature = "parallel")]
    {
        if let Some(n) = requested.filter(|&n| n > 0) {
            // Already-initialized pools are fine; keep whichever came first.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = requested;
        1
    }
}

/// Map `f` over `0..n`, collecting results in index order.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if enabled() && n > 1 {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Map `f` over a slice, collecting results in order.
pub fn map_slice<A, R, F>(items: &[A], f: F) -> Vec<R>
where
    A: Sync,
    R: Send,
    F: Fn(&A) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if enabled() && items.len() > 1 {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    items.iter().map(f).collect()
}

/// Apply `f` to consecutive `chunk`-sized mutable pieces of `data`.
pub fn for_chunks_mut<A, F>(data: &mut [A], chunk: usize, f: F)
where
    A: Send,
    F: Fn(usize, &mut [A]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if enabled() && data.len() > chunk {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    for (i, c) in data.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_paths_agree() {
        let par = map_range(100, |i| (i as f64).sqrt());
        set_enabled(false);
        let seq = map_range(100, |i| (i as f64).sqrt());
        set_enabled(true);
        assert_eq!(par, seq);
    }

    #[test]
    fn chunks_visit_everything_once() {
        let mut v = vec![0usize; 37];
        for_chunks_mut(&mut v, 5, |i, c| {
            for x in c.iter_mut() {
                *x += i + 1;
            }
        });
        assert_eq!(v[0], 1);
        assert_eq!(v[36], 8);
    }
}
