//! Order-preserving fan-out over independent items with scoped threads.

use std::num::NonZeroUsize;

/// Environment variable capping the number of worker threads.
pub const THREADS_VAR: &str = "COMBO_THREADS";

/// Worker count: `COMBO_THREADS` when it parses to a positive integer, else the machine's
/// available parallelism.
pub fn thread_count() -> usize {
    std::env::var(THREADS_VAR)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, NonZeroUsize::get))
}

/// `(0..n).map(f)` computed on up to [`thread_count`] threads; results keep index order.
pub fn map_indices<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let threads = thread_count().min(n.max(1));
    if threads <= 1 {
        return (0..n).map(f).collect();
    }
    let chunk = n.div_ceil(threads);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|w| s.spawn(move || (w * chunk..((w + 1) * chunk).min(n)).map(f).collect::<Vec<T>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_order() {
        let v = map_indices(37, |i| i * i);
        assert_eq!(v, (0..37).map(|i| i * i).collect::<Vec<_>>());
        assert!(map_indices(0, |i| i).is_empty());
    }
}
