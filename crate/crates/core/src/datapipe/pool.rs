//! Order-preserving worker pool. Outputs land at their input index, so
//! results never depend on the worker count.

use std::sync::Mutex;

/// Environment variable holding the data-pipeline worker count.
pub const WORKERS_ENV: &str = "U2_NUM_WORKERS";

/// Worker count from [`WORKERS_ENV`], defaulting to 1.
pub fn num_workers() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Applies `f(index, item)` to every item on up to `workers` threads.
pub fn par_map<I, O, F>(workers: usize, items: Vec<I>, f: F) -> Vec<O>
where
    I: Send,
    O: Send,
    F: Fn(usize, I) -> O + Sync,
{
    let n = items.len();
    let workers = workers.clamp(1, n.max(1));
    if workers == 1 {
        return items.into_iter().enumerate().map(|(i, x)| f(i, x)).collect();
    }
    let queue = Mutex::new(items.into_iter().enumerate());
    let slots: Vec<Mutex<Option<O>>> = (0..n).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let next = queue.lock().expect("queue poisoned").next();
                let Some((i, item)) = next else { break };
                let out = f(i, item);
                *slots[i].lock().expect("slot poisoned") = Some(out);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().expect("slot poisoned").expect("every slot filled"))
        .collect()
}
