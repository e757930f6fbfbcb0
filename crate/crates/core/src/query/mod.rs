//! Query routing, batch planning, the sub-index cache and the pipelined
//! executor.
//!
//! A batch is routed through the [`MetaIndex`] (an HNSW over partition
//! centroids), its `R x B` sub demands are deduplicated into a
//! [`BatchPlan`], and [`QueryEngine::execute`] runs fetch, deserialize and
//! search as concurrent stages joined by bounded queues. Simulated stage
//! times come from the fabric cost model and [`StageCosts`]; the makespan is
//! computed by [`pipeline::simulate`] from those per-task costs, so metrics
//! are deterministic regardless of thread scheduling.

mod cache;
mod engine;
pub mod pipeline;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hnsw::{HnswIndex, HnswParams, SearchStats};
use crate::vector::{Neighbor, VectorStore};

pub use cache::{CachedSub, SubCache};
pub use engine::{BatchOutcome, EngineParams, ExecutionMetrics, MetricsRow, QueryEngine, QueryResult, StageCosts, TaskTiming};

/// HNSW over the partition centroids; node labels are partition ids.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaIndex {
    pub index: HnswIndex,
    pub e_meta: usize,
}

/// Levels are clamped at 2 so the meta-index has at most three layers.
pub const META_LEVEL_CAP: u32 = 2;

impl MetaIndex {
    pub fn build(centroids: &VectorStore, mut params: HnswParams, e_meta: usize) -> Result<Self> {
        params.level_cap = Some(META_LEVEL_CAP);
        let labels: Vec<u64> = (0..centroids.len() as u64).collect();
        Ok(Self {
            index: HnswIndex::build_with_labels(centroids, &labels, params)?,
            e_meta,
        })
    }

    pub fn from_index(index: HnswIndex, e_meta: usize) -> Result<Self> {
        if index.max_level() > META_LEVEL_CAP {
            return Err(Error::Malformed("meta-index has more than three layers".into()));
        }
        Ok(Self { index, e_meta })
    }

    pub fn p(&self) -> usize {
        self.index.ntotal()
    }

    pub fn route(&self, q: &[f32], r: usize) -> Vec<usize> {
        self.route_counted(q, r).0
    }

    /// The `r` partitions whose centroids are nearest to `q`.
    pub fn route_counted(&self, q: &[f32], r: usize) -> (Vec<usize>, SearchStats) {
        let (hits, stats) = self.index.search_counted(q, r, self.e_meta.max(r));
        (hits.into_iter().map(|n| n.id as usize).collect(), stats)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryBatch {
    pub queries: VectorStore,
    pub k: usize,
    pub r: usize,
    /// Arrival timestamps in seconds, non-decreasing; enables SLO truncation.
    pub arrival_times: Option<Vec<f64>>,
}

impl QueryBatch {
    pub fn new(queries: VectorStore, k: usize, r: usize) -> Self {
        Self {
            queries,
            k,
            r,
            arrival_times: None,
        }
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        if self.queries.is_empty() {
            return Err(Error::invalid("query batch must not be empty"));
        }
        if self.k == 0 || self.r == 0 {
            return Err(Error::invalid("k and R must be positive"));
        }
        if self.r > p {
            return Err(Error::invalid(format!("R = {} exceeds P = {p}", self.r)));
        }
        if let Some(t) = &self.arrival_times {
            if t.len() != self.queries.len() {
                return Err(Error::invalid("one arrival time per query required"));
            }
            if t.windows(2).any(|w| w[1] < w[0]) {
                return Err(Error::invalid("arrival times must be non-decreasing"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    /// Route of each planned query (the first `included` of the batch).
    pub routes: Vec<Vec<usize>>,
    /// Uncached subs, each once, by descending demand then ascending id.
    pub fetch_list: Vec<usize>,
    /// Cached subs, ascending id.
    pub ready_list: Vec<usize>,
    /// Sub id to the planned queries that need it, ascending.
    pub demand: BTreeMap<usize, Vec<usize>>,
    /// Queries `included..` were cut by SLO truncation.
    pub included: usize,
    pub meta_stats: SearchStats,
}

impl BatchPlan {
    pub fn deferred(&self, batch_len: usize) -> std::ops::Range<usize> {
        self.included..batch_len
    }
}

/// Number of leading queries that fit before the oldest query's wait would
/// exceed `slo_wait`.
pub fn slo_cut(arrivals: &[f64], slo_wait: f64) -> usize {
    match arrivals.first() {
        None => 0,
        Some(&t0) => arrivals.iter().position(|&t| t - t0 > slo_wait).unwrap_or(arrivals.len()),
    }
}

/// Routes the batch, dedups sub demand and splits it into cached and
/// uncached subs. Cached subs are touched so they become most recent.
pub fn plan_batch(batch: &QueryBatch, meta: &MetaIndex, cache: &mut SubCache, slo_wait: Option<f64>) -> Result<BatchPlan> {
    batch.validate(meta.p())?;
    let included = match (&batch.arrival_times, slo_wait) {
        (Some(t), Some(w)) => slo_cut(t, w).max(1),
        _ => batch.len(),
    };
    let mut meta_stats = SearchStats::default();
    let mut routes = Vec::with_capacity(included);
    let mut demand: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for qi in 0..included {
        let (route, st) = meta.route_counted(batch.queries.get(qi), batch.r);
        meta_stats.distance_computations += st.distance_computations;
        for &s in &route {
            let list = demand.entry(s).or_default();
            if list.last() != Some(&qi) {
                list.push(qi);
            }
        }
        routes.push(route);
    }
    let mut fetch_list = Vec::new();
    let mut ready_list = Vec::new();
    for &s in demand.keys() {
        if cache.touch(s) {
            ready_list.push(s);
        } else {
            fetch_list.push(s);
        }
    }
    fetch_list.sort_by(|a, b| demand[b].len().cmp(&demand[a].len()).then(a.cmp(b)));
    Ok(BatchPlan {
        routes,
        fetch_list,
        ready_list,
        demand,
        included,
        meta_stats,
    })
}

/// Global `k` smallest over the partial lists, each id at most once (its
/// smallest distance), ties by id. Independent of the order of `partials`.
pub fn merge_topk<L: AsRef<[Neighbor]>>(partials: &[L], k: usize) -> Vec<Neighbor> {
    let mut all: Vec<Neighbor> = partials.iter().flat_map(|p| p.as_ref().iter().copied()).collect();
    all.sort_unstable();
    let mut seen = std::collections::HashSet::with_capacity(all.len());
    all.retain(|n| seen.insert(n.id));
    all.truncate(k);
    all
}

/// Mean fraction of each query's true top-k ids found in its returned top-k.
pub fn recall_at_k(results: &[Vec<Neighbor>], truth: &[Vec<u64>], k: usize) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    let total: f64 = results
        .iter()
        .zip(truth)
        .map(|(r, t)| {
            let want: std::collections::HashSet<u64> = t.iter().take(k).copied().collect();
            let hit = r.iter().take(k).filter(|n| want.contains(&n.id)).count();
            hit as f64 / want.len().max(1) as f64
        })
        .sum();
    total / results.len() as f64
}

/// Serializable bundle of the engine's tunables, shared with the CLI config.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoutingParams {
    pub k: usize,
    pub r: usize,
    pub e_meta: usize,
    pub e_sub: usize,
}

impl Default for RoutingParams {
    fn default() -> Self {
        Self {
            k: 10,
            r: 4,
            e_meta: 32,
            e_sub: 96,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vector::{brute_force_topk, Metric};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn centroids(p: usize, d: usize, seed: u64) -> VectorStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VectorStore::from_flat(d, (0..p * d).map(|_| rng.random::<f32>() * 10.0).collect(), Metric::Euclidean).unwrap()
    }

    #[test]
    fn meta_index_has_at_most_three_layers() {
        let c = centroids(500, 4, 1);
        let m = MetaIndex::build(&c, HnswParams { level_lambda: 5.0, ..HnswParams::with_m(4) }, 16).unwrap();
        assert!(m.index.max_level() <= 2);
        assert_eq!(m.p(), 500);
    }

    #[test]
    fn centroid_routes_to_itself() {
        let mut hits = 0;
        let mut total = 0;
        for seed in 0..10 {
            let c = centroids(50, 8, seed);
            let m = MetaIndex::build(&c, HnswParams { rng_seed: seed, ..HnswParams::with_m(8) }, 16).unwrap();
            for j in 0..50 {
                total += 1;
                hits += (m.route(c.get(j), 1) == vec![j]) as usize;
            }
        }
        assert!(hits as f64 >= 0.99 * total as f64, "{hits}/{total}");
    }

    #[test]
    fn exhaustive_routing_is_brute_force_order() {
        let c = centroids(30, 6, 3);
        let m = MetaIndex::build(&c, HnswParams::with_m(4), 30).unwrap();
        let q = [1.0f32; 6];
        let want: Vec<usize> = brute_force_topk(&c, &q, 30).unwrap().iter().map(|n| n.id as usize).collect();
        assert_eq!(m.route(&q, 30), want);
    }

    /// A meta-index whose routes are fixed by hand: centroids on a line,
    /// queries placed to hit chosen pairs.
    fn plan_for(routes: &[[usize; 2]], cached: &[usize]) -> BatchPlan {
        let c = VectorStore::from_rows(&[[0.0f32], [10.0], [20.0], [30.0], [40.0]], Metric::Euclidean).unwrap();
        let meta = MetaIndex::build(&c, HnswParams::with_m(2), 5).unwrap();
        let qs: Vec<[f32; 1]> = routes.iter().map(|r| [(r[0] + r[1]) as f32 * 5.0 + 0.1 * (r[0] as f32 - r[1] as f32).signum()]).collect();
        let batch = QueryBatch::new(VectorStore::from_rows(&qs, Metric::Euclidean).unwrap(), 1, 2);
        let mut cache = SubCache::new(4);
        for &s in cached {
            cache.insert(s, std::sync::Arc::new(CachedSub::for_tests(s)));
        }
        plan_batch(&batch, &meta, &mut cache, None).unwrap()
    }

    #[test]
    fn plan_dedups_and_orders_by_demand() {
        // q1, q4 need {1,2}; q2 needs {3,4}; q3 needs {3,2}: subs 2 and 3 have demand 2.
        let plan = plan_for(&[[1, 2], [3, 4], [2, 3], [1, 2]], &[]);
        assert_eq!(plan.routes[0].iter().copied().collect::<std::collections::BTreeSet<_>>(), [1, 2].into());
        assert_eq!(plan.fetch_list, vec![2, 1, 3, 4]);
        assert_eq!(plan.demand[&2], vec![0, 2, 3]);
        assert_eq!(plan.demand[&3], vec![1, 2]);
        assert!(plan.ready_list.is_empty());
    }

    #[test]
    fn cached_subs_go_to_ready_list() {
        let plan = plan_for(&[[1, 2], [3, 4]], &[1, 2, 3, 4]);
        assert!(plan.fetch_list.is_empty());
        assert_eq!(plan.ready_list, vec![1, 2, 3, 4]);
        let plan = plan_for(&[[1, 2], [1, 2], [1, 2]], &[]);
        assert_eq!(plan.fetch_list.len(), 2);
    }

    #[test]
    fn slo_truncation_cuts_late_queries() {
        assert_eq!(slo_cut(&[0.0, 0.5, 1.0, 1.5], 1.0), 3);
        assert_eq!(slo_cut(&[2.0, 2.0], 0.0), 2);
        let c = centroids(4, 2, 1);
        let meta = MetaIndex::build(&c, HnswParams::with_m(2), 8).unwrap();
        let mut batch = QueryBatch::new(centroids(4, 2, 2), 1, 1);
        batch.arrival_times = Some(vec![0.0, 1e-4, 5e-4, 2e-3]);
        let plan = plan_batch(&batch, &meta, &mut SubCache::new(1), Some(1e-3)).unwrap();
        assert_eq!(plan.included, 3);
        assert_eq!(plan.routes.len(), 3);
        assert_eq!(plan.deferred(4), 3..4);
    }

    #[test]
    fn merge_is_idempotent_order_free_and_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let store = centroids(200, 3, 9);
        let q = [5.0f32; 3];
        let mut partials: Vec<Vec<Neighbor>> = Vec::new();
        let mut union = std::collections::BTreeSet::new();
        for _ in 0..5 {
            let mut p: Vec<Neighbor> = (0..20)
                .map(|_| {
                    let id = rng.random_range(0..200usize);
                    union.insert(id);
                    Neighbor::new(id as u64, store.distance_to(id, &q))
                })
                .collect();
            p.sort();
            p.dedup();
            partials.push(p);
        }
        let merged = merge_topk(&partials, 10);
        assert_eq!(merge_topk(&[merged.clone(), merged.clone()], 10), merged);
        let mut rev = partials.clone();
        rev.reverse();
        assert_eq!(merge_topk(&rev, 10), merged);
        let ids: Vec<usize> = union.into_iter().collect();
        let sub = store.select(&ids);
        let want: Vec<u64> = brute_force_topk(&sub, &q, 10).unwrap().iter().map(|n| ids[n.id as usize] as u64).collect();
        assert_eq!(merged.iter().map(|n| n.id).collect::<Vec<_>>(), want);
    }

    #[test]
    fn recall_of_truth_is_one() {
        let truth = vec![vec![1u64, 2, 3], vec![4, 5, 6]];
        let res: Vec<Vec<Neighbor>> = truth.iter().map(|t| t.iter().map(|&i| Neighbor::new(i, 0.0)).collect()).collect();
        assert_eq!(recall_at_k(&res, &truth, 3), 1.0);
    }
}
