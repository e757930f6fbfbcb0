//! Simulated timing of the three-stage executor.
//!
//! One fetch role and one deserialize role process fetched subs in fetch-list
//! order; `workers` search roles take cached subs first and then fetched subs
//! in hand-off order, each on the earliest-free worker. Queues between stages
//! hold at most `queue_cap` items, so an upstream stage blocks when its
//! downstream queue is full. With `F`, `D`, `S` the stage completion times of
//! task `i` and `f`, `d`, `s` its costs:
//!
//! ```text
//! push_f[i] = max(F[i], deser_start[i - cap])       F[i] = push_f[i-1] + f[i]
//! deser_start[i] = max(push_f[i], push_d[i-1])       D[i] = deser_start[i] + d[i]
//! push_d[i] = max(D[i], search_start[i - cap])
//! search_start[i] = max(push_d[i], earliest worker free)
//! ```
//!
//! The makespan is the time the last search finishes.

/// Costs of one task in simulated seconds.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StageTimes {
    pub fetch: f64,
    pub deser: f64,
    pub search: f64,
}

/// Pipelined makespan for `fetched` tasks in hand-off order plus `cached`
/// search-only tasks.
pub fn simulate(fetched: &[StageTimes], cached: &[f64], workers: usize, queue_cap: usize) -> f64 {
    let workers = workers.max(1);
    let cap = queue_cap.max(1);
    let mut free = vec![0.0f64; workers];
    let earliest = |free: &[f64]| {
        free.iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1).then(a.0.cmp(&b.0)))
            .map(|(i, _)| i)
            .unwrap()
    };
    for &s in cached {
        let w = earliest(&free);
        free[w] += s;
    }
    let n = fetched.len();
    let mut deser_start = vec![0.0f64; n];
    let mut search_start = vec![0.0f64; n];
    let (mut fetch_free, mut deser_free) = (0.0f64, 0.0f64);
    for (i, t) in fetched.iter().enumerate() {
        let done_f = fetch_free + t.fetch;
        let push_f = if i >= cap { done_f.max(deser_start[i - cap]) } else { done_f };
        fetch_free = push_f;
        deser_start[i] = push_f.max(deser_free);
        let done_d = deser_start[i] + t.deser;
        let push_d = if i >= cap { done_d.max(search_start[i - cap]) } else { done_d };
        deser_free = push_d;
        let w = earliest(&free);
        search_start[i] = push_d.max(free[w]);
        free[w] = search_start[i] + t.search;
    }
    free.into_iter().fold(0.0, f64::max)
}

/// Fetch everything, then deserialize everything, then search everything.
pub fn sequential(fetched: &[StageTimes], cached: &[f64]) -> f64 {
    fetched.iter().map(|t| t.fetch + t.deser + t.search).sum::<f64>() + cached.iter().sum::<f64>()
}
