//! Worker-count selection and a deterministic parallel map.

/// Worker count: `LANEID_THREADS` if set, else available parallelism.
pub fn worker_count() -> usize {
    if let Ok(v) = std::env::var("LANEID_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            return n.max(1);
        }
    }
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

/// Maps `f` over the items on up to [`worker_count`] threads and returns the
/// results in input order, so any later reduction is order-deterministic.
pub fn parallel_map<T, R, F>(items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(usize, T) -> R + Sync,
{
    let workers = worker_count().min(items.len().max(1));
    if workers <= 1 {
        return items.into_iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }

    let mut slots: Vec<Option<R>> = items.iter().map(|_| None).collect();
    let jobs: Vec<(usize, T)> = items.into_iter().enumerate().collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let jobs = std::sync::Mutex::new(jobs.into_iter().map(Some).collect::<Vec<_>>());
    let results = std::sync::Mutex::new(&mut slots);

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                let job = {
                    let mut jobs = jobs.lock().unwrap();
                    if idx >= jobs.len() {
                        break;
                    }
                    jobs[idx].take()
                };
                let Some((i, item)) = job else { break };
                let r = f(i, item);
                let mut results = results.lock().unwrap();
                results[i] = Some(r);
            });
        }
    });

    slots.into_iter().map(|s| s.expect("every job ran")).collect()
}
