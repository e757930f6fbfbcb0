use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};
use std::thread;

use crossbeam_channel::{bounded, unbounded};
use serde::{Deserialize, Serialize};

use super::pipeline::{self, StageTimes};
use super::{merge_topk, plan_batch, BatchPlan, CachedSub, MetaIndex, QueryBatch, SubCache};
use crate::error::{Error, Result};
use crate::fabric::RemoteMemory;
use crate::layout::{meta_slot_len, plan_fetch, read_meta, read_meta_index, splice, GlobalMeta};
use crate::vector::Neighbor;

/// Calibration constants that turn work counts into simulated seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageCosts {
    /// Seconds to decode one fetched byte.
    pub deser_per_byte: f64,
    /// Seconds per scalar operation of a distance computation (`d` per distance).
    pub per_dim_op: f64,
}

impl Default for StageCosts {
    fn default() -> Self {
        Self {
            deser_per_byte: 1e-10,
            per_dim_op: 5e-10,
        }
    }
}

impl StageCosts {
    pub fn distance_cost(&self, distance_computations: u64, dim: usize) -> f64 {
        self.per_dim_op * dim as f64 * distance_computations as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineParams {
    pub e_meta: usize,
    pub e_sub: usize,
    /// Resident sub-index limit `c`.
    pub cache_capacity: usize,
    pub search_workers: usize,
    /// Seconds a batch may stay open after its first arrival.
    pub slo_wait: Option<f64>,
    pub costs: StageCosts,
    /// Re-read the metadata table before each batch to drop stale cache entries.
    pub refresh_meta: bool,
}

impl Default for EngineParams {
    fn default() -> Self {
        Self {
            e_meta: 32,
            e_sub: 96,
            cache_capacity: 2,
            search_workers: 1,
            slo_wait: None,
            costs: StageCosts::default(),
            refresh_meta: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct QueryResult {
    pub neighbors: Vec<Neighbor>,
    /// Some routed sub could not be fetched; results cover the rest.
    pub degraded: bool,
}

/// Simulated cost of one sub's trip through the stages.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct TaskTiming {
    pub sub: usize,
    pub cached: bool,
    pub fetch: f64,
    pub deser: f64,
    pub search: f64,
    pub bytes: u64,
    pub distance_computations: u64,
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExecutionMetrics {
    pub batch_id: u64,
    pub b: usize,
    pub fetched: usize,
    pub cache_hits: usize,
    pub t_meta: f64,
    pub t_net: f64,
    pub t_deser: f64,
    pub t_comp: f64,
    pub t_pipeline: f64,
    pub t_sequential: f64,
    pub bytes_fetched: u64,
    pub degraded_queries: usize,
    pub recall: Option<f64>,
    /// Fetched tasks in hand-off order, then cached tasks.
    pub tasks: Vec<TaskTiming>,
}

impl ExecutionMetrics {
    /// Simulated end-to-end batch latency.
    pub fn latency(&self) -> f64 {
        self.t_meta + self.t_pipeline
    }

    pub fn row(&self, worker: u32) -> MetricsRow {
        MetricsRow {
            batch_id: self.batch_id,
            b: self.b,
            fetched: self.fetched,
            cache_hits: self.cache_hits,
            t_meta: self.t_meta,
            t_net: self.t_net,
            t_deser: self.t_deser,
            t_comp: self.t_comp,
            t_pipeline: self.t_pipeline,
            recall: self.recall,
            worker,
        }
    }
}

/// One CSV row of batch metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub batch_id: u64,
    #[serde(rename = "B")]
    pub b: usize,
    pub fetched: usize,
    pub cache_hits: usize,
    pub t_meta: f64,
    pub t_net: f64,
    pub t_deser: f64,
    pub t_comp: f64,
    pub t_pipeline: f64,
    pub recall: Option<f64>,
    pub worker: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutcome {
    /// One result per planned query (`plan.included` of them).
    pub results: Vec<QueryResult>,
    pub metrics: ExecutionMetrics,
    /// Number of planned queries; the remainder was deferred by SLO truncation.
    pub included: usize,
}

/// A search worker bound to one epoch's region, with its own cache.
pub struct QueryEngine {
    fabric: Arc<dyn RemoteMemory>,
    region: u32,
    generation: u64,
    meta: GlobalMeta,
    meta_index: MetaIndex,
    cache: SubCache,
    params: EngineParams,
    batches_run: u64,
}

struct Fetched {
    sub: usize,
    result: Result<(Vec<Vec<u8>>, f64)>,
}

enum Ready {
    Decoded {
        sub: usize,
        entry: Arc<CachedSub>,
        fetch: f64,
        deser: f64,
        bytes: u64,
        cached: bool,
    },
    Failed {
        sub: usize,
        fetch: f64,
    },
}

struct TaskOut {
    timing: TaskTiming,
    partials: Vec<(usize, Vec<Neighbor>)>,
    entry: Option<Arc<CachedSub>>,
}

impl QueryEngine {
    /// Reads the metadata and meta-index of `region` (two to three round trips).
    pub fn connect(fabric: Arc<dyn RemoteMemory>, region: u32, params: EngineParams) -> Result<Self> {
        let (generation, meta) = read_meta(fabric.as_ref(), region, None)?;
        let meta_index = MetaIndex::from_index(read_meta_index(fabric.as_ref(), region, &meta)?, params.e_meta)?;
        Ok(Self {
            fabric,
            region,
            generation,
            meta,
            meta_index,
            cache: SubCache::new(params.cache_capacity),
            params,
            batches_run: 0,
        })
    }

    fn meta_read_cost(&self) -> f64 {
        self.fabric.cost_model().transfer_cost(8 + 2 * meta_slot_len(self.meta.p()))
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn region(&self) -> u32 {
        self.region
    }

    pub fn meta(&self) -> &GlobalMeta {
        &self.meta
    }

    pub fn meta_index(&self) -> &MetaIndex {
        &self.meta_index
    }

    pub fn cache(&self) -> &SubCache {
        &self.cache
    }

    pub fn cache_mut(&mut self) -> &mut SubCache {
        &mut self.cache
    }

    pub fn params(&self) -> &EngineParams {
        &self.params
    }

    pub fn fabric(&self) -> &Arc<dyn RemoteMemory> {
        &self.fabric
    }

    pub fn dim(&self) -> usize {
        self.meta_index.index.dim()
    }

    /// Re-reads the metadata table and evicts cache entries whose remote copy
    /// has since been committed to. Returns the simulated cost.
    pub fn refresh_meta(&mut self) -> Result<f64> {
        let (generation, meta) = read_meta(self.fabric.as_ref(), self.region, Some(self.meta.p()))?;
        self.generation = generation;
        self.cache
            .retain_current(|s| meta.subs.get(s).map(|e| e.version));
        self.meta = meta;
        Ok(self.meta_read_cost())
    }

    /// Rebinds to another region (a new epoch): clears the cache and reloads
    /// the metadata and meta-index.
    pub fn switch_region(&mut self, region: u32) -> Result<()> {
        let (generation, meta) = read_meta(self.fabric.as_ref(), region, None)?;
        let meta_index = MetaIndex::from_index(read_meta_index(self.fabric.as_ref(), region, &meta)?, self.params.e_meta)?;
        self.cache.clear();
        self.region = region;
        self.generation = generation;
        self.meta = meta;
        self.meta_index = meta_index;
        Ok(())
    }

    pub fn plan(&mut self, batch: &QueryBatch) -> Result<BatchPlan> {
        plan_batch(batch, &self.meta_index, &mut self.cache, self.params.slo_wait)
    }

    /// Plans and executes one batch, refreshing metadata first if configured.
    pub fn run_batch(&mut self, batch: &QueryBatch) -> Result<BatchOutcome> {
        let mut t_meta = 0.0;
        if self.params.refresh_meta {
            t_meta += self.refresh_meta()?;
        }
        let plan = self.plan(batch)?;
        t_meta += self.params.costs.distance_cost(plan.meta_stats.distance_computations, self.dim());
        let mut out = self.execute(&plan, batch)?;
        out.metrics.t_meta = t_meta;
        Ok(out)
    }

    fn fetch_once(fabric: &dyn RemoteMemory, region: u32, meta: &GlobalMeta, sub: usize) -> Result<(Vec<Vec<u8>>, f64)> {
        let plan = plan_fetch(meta, region, sub)?;
        let t = fabric.doorbell(plan.ops())?;
        Ok((t.value, t.cost))
    }

    /// One doorbell per sub, retried once on failure.
    fn fetch_with_retry(fabric: &dyn RemoteMemory, region: u32, meta: &GlobalMeta, sub: usize) -> Result<(Vec<Vec<u8>>, f64)> {
        Self::fetch_once(fabric, region, meta, sub).or_else(|_| Self::fetch_once(fabric, region, meta, sub))
    }

    fn decode(meta: &GlobalMeta, sub: usize, bufs: &[Vec<u8>]) -> Result<CachedSub> {
        let overflow: &[u8] = bufs.get(1).map(Vec::as_slice).unwrap_or(&[]);
        let sp = splice(&bufs[0], overflow, meta, sub)?;
        Ok(CachedSub {
            index: sp.decode()?,
            sync: sp.sync,
            version: meta.subs[sub].version,
        })
    }

    /// Runs the plan with concurrent fetch, deserialize and search roles.
    pub fn execute(&mut self, plan: &BatchPlan, batch: &QueryBatch) -> Result<BatchOutcome> {
        if plan.routes.len() != plan.included {
            return Err(Error::invalid("plan does not match its batch"));
        }
        let queue_cap = (2 * self.params.cache_capacity).max(1);
        let workers = self.params.search_workers.max(1);
        let costs = self.params.costs;
        let dim = self.dim();
        let (k, e_sub) = (batch.k, self.params.e_sub);
        let fabric = self.fabric.as_ref();
        let region = self.region;
        let meta = &self.meta;
        let refreshed: Mutex<Option<(u64, GlobalMeta)>> = Mutex::new(None);

        let (ready_tx, ready_rx) = unbounded::<Ready>();
        for &s in &plan.ready_list {
            let entry = self
                .cache
                .peek(s)
                .cloned()
                .ok_or_else(|| Error::Inconsistent(format!("ready sub {s} is not cached")))?;
            ready_tx
                .send(Ready::Decoded {
                    sub: s,
                    entry,
                    fetch: 0.0,
                    deser: 0.0,
                    bytes: 0,
                    cached: true,
                })
                .expect("receiver alive");
        }
        drop(ready_tx);

        let outs: Vec<TaskOut> = thread::scope(|scope| {
            let (fetch_tx, fetch_rx) = bounded::<Fetched>(queue_cap);
            let (search_tx, search_rx) = bounded::<Ready>(queue_cap);
            let fetch_list = &plan.fetch_list;
            scope.spawn(move || {
                for &sub in fetch_list {
                    let result = Self::fetch_with_retry(fabric, region, meta, sub);
                    if fetch_tx.send(Fetched { sub, result }).is_err() {
                        break;
                    }
                }
            });
            let refreshed = &refreshed;
            scope.spawn(move || {
                for Fetched { sub, result } in fetch_rx {
                    let item = match result {
                        Err(_) => Ready::Failed { sub, fetch: 0.0 },
                        Ok((bufs, mut fetch)) => {
                            let bytes: u64 = bufs.iter().map(|b| b.len() as u64).sum();
                            let decoded = Self::decode(meta, sub, &bufs).or_else(|_| {
                                // A commit landed after our metadata read: refresh and refetch once.
                                let fresh = read_meta(fabric, region, Some(meta.p()))?;
                                fetch += fabric.cost_model().transfer_cost(8 + 2 * meta_slot_len(meta.p()));
                                let (bufs, f) = Self::fetch_with_retry(fabric, region, &fresh.1, sub)?;
                                fetch += f;
                                let r = Self::decode(&fresh.1, sub, &bufs);
                                *refreshed.lock().unwrap() = Some(fresh);
                                r
                            });
                            match decoded {
                                Ok(entry) => Ready::Decoded {
                                    sub,
                                    entry: Arc::new(entry),
                                    fetch,
                                    deser: costs.deser_per_byte * bytes as f64,
                                    bytes,
                                    cached: false,
                                },
                                Err(_) => Ready::Failed { sub, fetch },
                            }
                        }
                    };
                    if search_tx.send(item).is_err() {
                        break;
                    }
                }
            });
            let handles: Vec<_> = (0..workers)
                .map(|_| {
                    let ready_rx = ready_rx.clone();
                    let search_rx = search_rx.clone();
                    scope.spawn(move || {
                        let mut outs = Vec::new();
                        let items = std::iter::from_fn(|| ready_rx.try_recv().ok()).chain(search_rx.iter());
                        for item in items {
                            outs.push(Self::search_task(item, plan, batch, k, e_sub, dim, &costs));
                        }
                        outs
                    })
                })
                .collect();
            drop(search_rx);
            handles.into_iter().flat_map(|h| h.join().expect("search worker panicked")).collect()
        });

        if let Some((generation, fresh)) = refreshed.into_inner().unwrap() {
            self.generation = generation;
            self.cache.retain_current(|s| fresh.subs.get(s).map(|e| e.version));
            self.meta = fresh;
        }
        Ok(self.finish(plan, batch, outs, workers, queue_cap))
    }

    fn search_task(item: Ready, plan: &BatchPlan, batch: &QueryBatch, k: usize, e_sub: usize, dim: usize, costs: &StageCosts) -> TaskOut {
        match item {
            Ready::Failed { sub, fetch } => TaskOut {
                timing: TaskTiming {
                    sub,
                    fetch,
                    failed: true,
                    ..Default::default()
                },
                partials: Vec::new(),
                entry: None,
            },
            Ready::Decoded {
                sub,
                entry,
                fetch,
                deser,
                bytes,
                cached,
            } => {
                let mut dc = 0u64;
                let partials = plan.demand[&sub]
                    .iter()
                    .map(|&qi| {
                        let (res, st) = entry.index.search_counted(batch.queries.get(qi), k, e_sub);
                        dc += st.distance_computations;
                        (qi, res)
                    })
                    .collect();
                TaskOut {
                    timing: TaskTiming {
                        sub,
                        cached,
                        fetch,
                        deser,
                        search: costs.distance_cost(dc, dim),
                        bytes,
                        distance_computations: dc,
                        failed: false,
                    },
                    partials,
                    entry: (!cached).then_some(entry),
                }
            }
        }
    }

    fn finish(&mut self, plan: &BatchPlan, batch: &QueryBatch, mut outs: Vec<TaskOut>, workers: usize, queue_cap: usize) -> BatchOutcome {
        let rank: BTreeMap<usize, usize> = plan.fetch_list.iter().enumerate().map(|(i, &s)| (s, i)).collect();
        outs.sort_by_key(|o| (o.timing.cached, if o.timing.cached { o.timing.sub } else { rank[&o.timing.sub] }));
        let mut partials: Vec<Vec<Vec<Neighbor>>> = vec![Vec::new(); plan.included];
        let mut degraded = vec![false; plan.included];
        for o in &mut outs {
            if o.timing.failed {
                for &qi in &plan.demand[&o.timing.sub] {
                    degraded[qi] = true;
                }
            }
            for (qi, res) in o.partials.drain(..) {
                partials[qi].push(res);
            }
        }
        let results: Vec<QueryResult> = partials
            .iter()
            .zip(&degraded)
            .map(|(p, &d)| QueryResult {
                neighbors: merge_topk(p, batch.k),
                degraded: d,
            })
            .collect();
        for o in &outs {
            if let Some(e) = &o.entry {
                self.cache.insert(o.timing.sub, Arc::clone(e));
            }
        }
        let fetched: Vec<StageTimes> = outs
            .iter()
            .filter(|o| !o.timing.cached)
            .map(|o| StageTimes {
                fetch: o.timing.fetch,
                deser: o.timing.deser,
                search: o.timing.search,
            })
            .collect();
        let cached: Vec<f64> = outs.iter().filter(|o| o.timing.cached).map(|o| o.timing.search).collect();
        let tasks: Vec<TaskTiming> = outs.into_iter().map(|o| o.timing).collect();
        let metrics = ExecutionMetrics {
            batch_id: self.batches_run,
            b: plan.included,
            fetched: tasks.iter().filter(|t| !t.cached && !t.failed).count(),
            cache_hits: plan.ready_list.len(),
            t_meta: 0.0,
            t_net: tasks.iter().map(|t| t.fetch).sum(),
            t_deser: tasks.iter().map(|t| t.deser).sum(),
            t_comp: tasks.iter().map(|t| t.search).sum(),
            t_pipeline: pipeline::simulate(&fetched, &cached, workers, queue_cap),
            t_sequential: pipeline::sequential(&fetched, &cached),
            bytes_fetched: tasks.iter().map(|t| t.bytes).sum(),
            degraded_queries: degraded.iter().filter(|&&d| d).count(),
            recall: None,
            tasks,
        };
        self.batches_run += 1;
        BatchOutcome {
            results,
            metrics,
            included: plan.included,
        }
    }

    /// Reference executor: fetch, decode and search each sub in turn on the
    /// calling thread. Leaves the cache untouched.
    pub fn execute_sequential(&self, plan: &BatchPlan, batch: &QueryBatch) -> Result<Vec<QueryResult>> {
        let mut partials: Vec<Vec<Vec<Neighbor>>> = vec![Vec::new(); plan.included];
        let mut degraded = vec![false; plan.included];
        let mut run = |sub: usize, entry: &CachedSub| {
            for &qi in &plan.demand[&sub] {
                partials[qi].push(entry.index.search(batch.queries.get(qi), batch.k, self.params.e_sub));
            }
        };
        for &s in &plan.ready_list {
            let e = self.cache.peek(s).ok_or_else(|| Error::Inconsistent(format!("ready sub {s} is not cached")))?;
            run(s, e);
        }
        for &s in &plan.fetch_list {
            match Self::fetch_with_retry(self.fabric.as_ref(), self.region, &self.meta, s)
                .and_then(|(bufs, _)| Self::decode(&self.meta, s, &bufs))
            {
                Ok(e) => run(s, &e),
                Err(_) => {
                    for &qi in &plan.demand[&s] {
                        degraded[qi] = true;
                    }
                }
            }
        }
        Ok(partials
            .iter()
            .zip(degraded)
            .map(|(p, degraded)| QueryResult {
                neighbors: merge_topk(p, batch.k),
                degraded,
            })
            .collect())
    }
}
