//! Threading policy. `HYPERDIT_DETERMINISTIC=1` pins all work to one thread.

use std::sync::atomic::{AtomicU8, Ordering};

const UNSET: u8 = 0;
const ON: u8 = 1;
const OFF: u8 = 2;

static OVERRIDE: AtomicU8 = AtomicU8::new(UNSET);

pub const DETERMINISTIC_ENV: &str = "HYPERDIT_DETERMINISTIC";

/// Whether single-threaded bit-exact mode is in force.
pub fn deterministic() -> bool {
    match OVERRIDE.load(Ordering::Relaxed) {
        ON => true,
        OFF => false,
        _ => std::env::var(DETERMINISTIC_ENV).map(|v| v == "1").unwrap_or(false),
    }
}

/// Process-wide override of the environment setting.
pub fn set_deterministic(on: bool) {
    OVERRIDE.store(if on { ON } else { OFF }, Ordering::Relaxed);
}

pub fn worker_count() -> usize {
    if deterministic() {
        1
    } else {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    }
}

/// Splits `0..n` into at most `workers` contiguous ranges.
pub fn chunk_ranges(n: usize, workers: usize) -> Vec<std::ops::Range<usize>> {
    let workers = workers.clamp(1, n.max(1));
    let base = n / workers;
    let extra = n % workers;
    let mut start = 0;
    (0..workers)
        .map(|w| {
            let len = base + usize::from(w < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .filter(|r| !r.is_empty())
        .collect()
}

/// Applies `f` to each contiguous chunk of `0..n` on its own thread; results come back in chunk order.
pub fn map_chunks<R: Send>(n: usize, f: impl Fn(std::ops::Range<usize>) -> R + Sync) -> Vec<R> {
    let ranges = chunk_ranges(n, worker_count());
    if ranges.len() <= 1 {
        return ranges.into_iter().map(&f).collect();
    }
    std::thread::scope(|scope| {
        let handles: Vec<_> = ranges.into_iter().map(|r| scope.spawn(|| f(r))).collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    })
}
