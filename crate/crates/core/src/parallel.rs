//! Order-preserving fan-out over scoped threads.
//!
//! `HEMULAB_THREADS` caps the worker count; `1` gives the single-thread
//! reference path.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

pub const THREADS_ENV: &str = "HEMULAB_THREADS";

pub fn threads() -> usize {
    let avail = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    match std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        Some(n) if n > 0 => n.min(avail.max(1)),
        _ => avail,
    }
}

/// Applies `f` to every item and returns results in input order.
pub fn map<X, R, F>(items: &[X], f: F) -> Vec<R>
where
    X: Sync,
    R: Send,
    F: Fn(&X) -> R + Sync,
{
    map_with(items, threads(), f)
}

/// [`map`] with at most `workers` threads.
pub fn map_with<X, R, F>(items: &[X], workers: usize, f: F) -> Vec<R>
where
    X: Sync,
    R: Send,
    F: Fn(&X) -> R + Sync,
{
    let n = workers.min(items.len());
    if n <= 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..n {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().expect("result slot") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("result slot").expect("every item processed"))
        .collect()
}
