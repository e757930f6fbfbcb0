//! A scripted mix of search and insert batches against one deployment, on a
//! simulated clock, with automatic rebuilds.
//!
//! Search batches go to the earliest-free of `workers` query engines; insert
//! batches go to the single coordinator. Each operation starts no earlier
//! than the previous one (dispatch order is the script order) and occupies
//! its resource for its simulated latency. A rebuild is triggered by an
//! insert batch that leaves the deployment needing one; the shadow build
//! runs on its own thread and its completion is scheduled at the trigger
//! time plus the modelled build time (the indexing model with the configured
//! calibration, plus the time to write the new region). Until then inserts
//! are buffered and searches merge the buffer. After the switch each worker
//! acknowledges on its next batch.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EpochManager, Phase, RebuildJob, RebuildParams, SwitchReport};
use crate::error::{Error, Result};
use crate::fabric::RemoteMemory;
use crate::insert::{InsertCoordinator, InsertParams, InsertStatus};
use crate::layout::meta_slot_len;
use crate::model::{predict_build, Calibration, ModelParams};
use crate::query::{EngineParams, QueryBatch, QueryEngine};
use crate::vector::VectorStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleParams {
    pub ops: usize,
    /// Probability that an operation is a search batch.
    pub search_fraction: f64,
    pub query_batch: usize,
    pub insert_batch: usize,
    pub k: usize,
    pub r: usize,
    pub workers: usize,
    pub engine: EngineParams,
    pub insert: InsertParams,
    pub rebuild: RebuildParams,
    pub auto_rebuild: bool,
    /// Threads the modelled rebuild is assumed to use.
    pub rebuild_threads: usize,
    /// Constants for the modelled rebuild duration.
    pub rebuild_calibration: Calibration,
    /// Trace bucket width in simulated seconds; `None` = 10x the median
    /// search batch latency.
    pub trace_window: Option<f64>,
    pub seed: u64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            ops: 1000,
            search_fraction: 0.8,
            query_batch: 32,
            insert_batch: 8,
            k: 10,
            r: 4,
            workers: 2,
            engine: EngineParams::default(),
            insert: InsertParams::default(),
            rebuild: RebuildParams::default(),
            auto_rebuild: true,
            rebuild_threads: 8,
            rebuild_calibration: Calibration::default(),
            trace_window: None,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum OpKind {
    Search,
    Insert,
}

#[derive(Debug, Clone, Serialize)]
pub struct OpRecord {
    pub index: usize,
    pub kind: OpKind,
    /// Search worker, if a search.
    pub worker: Option<u32>,
    pub start: f64,
    pub end: f64,
    pub items: usize,
    pub phase: Phase,
    pub epoch: u64,
    pub region: u32,
}

#[derive(Debug, Clone, Serialize)]
pub struct TraceRow {
    pub window: usize,
    pub t_start: f64,
    pub t_end: f64,
    /// Queries whose batch finished inside the window.
    pub queries: usize,
    pub inserts: usize,
    pub throughput_qps: f64,
    /// Phase at the window start.
    pub phase: Phase,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RebuildWindow {
    pub triggered_at: f64,
    pub switched_at: Option<f64>,
    pub steady_at: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScheduleReport {
    pub ops: Vec<OpRecord>,
    pub trace: Vec<TraceRow>,
    pub window: f64,
    pub rebuilds: Vec<RebuildWindow>,
    pub switches: Vec<SwitchReport>,
    /// `(label, index into the insert pool)` of every accepted insert.
    pub inserted: Vec<(u64, usize)>,
    /// Insert pool indices that could not be placed and were not buffered.
    pub rejected: Vec<usize>,
    pub queries_served: usize,
    pub makespan: f64,
}

impl ScheduleReport {
    /// Trace windows (excluding a trailing partial one) in which no query
    /// finished.
    pub fn zero_throughput_windows(&self) -> Vec<usize> {
        let full = self.trace.iter().filter(|w| w.t_end <= self.makespan + 1e-15);
        full.filter(|w| w.queries == 0).map(|w| w.window).collect()
    }

    /// Windows that overlap a rebuild or switch interval.
    pub fn windows_during_rebuild(&self) -> Vec<&TraceRow> {
        self.trace
            .iter()
            .filter(|w| {
                self.rebuilds.iter().any(|r| {
                    let end = r.steady_at.or(r.switched_at).unwrap_or(self.makespan);
                    w.t_end > r.triggered_at && w.t_start < end
                })
            })
            .collect()
    }
}

/// `workers` query engines, the insert coordinator and the epoch manager of
/// one deployment.
pub struct Cluster {
    pub fabric: Arc<dyn RemoteMemory>,
    pub engines: Vec<QueryEngine>,
    pub coordinator: InsertCoordinator,
    pub manager: EpochManager,
}

impl Cluster {
    pub fn connect(
        fabric: Arc<dyn RemoteMemory>,
        region: u32,
        epoch: u64,
        workers: usize,
        engine: EngineParams,
        insert: InsertParams,
        rebuild: RebuildParams,
    ) -> Result<Self> {
        if workers == 0 {
            return Err(Error::invalid("at least one search worker required"));
        }
        let engines = (0..workers)
            .map(|_| QueryEngine::connect(Arc::clone(&fabric), region, engine))
            .collect::<Result<Vec<_>>>()?;
        let coordinator = InsertCoordinator::connect(Arc::clone(&fabric), region, insert)?;
        let ids: Vec<u32> = (0..workers as u32).collect();
        let manager = EpochManager::new(Arc::clone(&fabric), region, epoch, &ids, rebuild)?;
        Ok(Self {
            fabric,
            engines,
            coordinator,
            manager,
        })
    }

    /// Acknowledges the current epoch on every worker.
    pub fn acknowledge_all(&mut self) -> Result<()> {
        for (w, e) in self.engines.iter_mut().enumerate() {
            self.manager.acknowledge_epoch(w as u32, e)?;
        }
        Ok(())
    }
}

fn rebuild_duration(cluster: &Cluster, params: &ScheduleParams, vectors: usize, dim: usize) -> Result<f64> {
    let b = &params.rebuild.build;
    let model = ModelParams {
        n: vectors.max(1),
        d: dim,
        p: b.partition.p,
        p_fetch: 1,
        e_build: b.sub_hnsw.e_build,
        i_max: b.partition.i_max,
        c_sample: b.partition.c_sample,
        l: b.partition.l,
        n_threads: params.rebuild_threads.max(1),
        calibration: params.rebuild_calibration,
        ..Default::default()
    };
    let compute = predict_build(&model)?.t_build;
    // Writing the new region: roughly the current one's size.
    let bytes = cluster.coordinator.meta().region_len;
    Ok(compute + cluster.fabric.cost_model().transfer_cost(bytes))
}

fn hash_cost(params: &ScheduleParams, n: usize, dim: usize) -> f64 {
    params.engine.costs.per_dim_op * (params.rebuild.lsh.h as usize * dim * n) as f64
}

/// Cost of a worker reloading metadata and the meta-index.
fn switch_cost(engine: &QueryEngine) -> f64 {
    let cm = engine.fabric().cost_model();
    let meta = engine.meta();
    cm.transfer_cost(64) + cm.transfer_cost(8 + 2 * meta_slot_len(meta.p())) + cm.transfer_cost(meta.meta_index_len)
}

fn rows(pool: &VectorStore, from: usize, n: usize) -> VectorStore {
    pool.select(&(from..from + n).collect::<Vec<_>>())
}

/// Runs the script. Queries cycle through `queries`; inserts consume
/// `inserts` in order and the script stops inserting once it is used up.
pub fn run_schedule(cluster: &mut Cluster, queries: &VectorStore, inserts: &VectorStore, params: &ScheduleParams) -> Result<ScheduleReport> {
    if queries.is_empty() || params.query_batch == 0 || params.insert_batch == 0 {
        return Err(Error::invalid("schedule needs queries and positive batch sizes"));
    }
    if !(0.0..=1.0).contains(&params.search_fraction) {
        return Err(Error::invalid("search fraction must be in [0, 1]"));
    }
    let workers = cluster.engines.len();
    let dim = queries.dim();
    let metric = queries.metric();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut worker_free = vec![0.0f64; workers];
    let mut coord_free = 0.0f64;
    let mut dispatch = 0.0f64;
    let (mut qcur, mut icur) = (0usize, 0usize);
    let mut pending: Option<(RebuildJob, f64)> = None;
    let mut report = ScheduleReport {
        ops: Vec::with_capacity(params.ops),
        trace: Vec::new(),
        window: 0.0,
        rebuilds: Vec::new(),
        switches: Vec::new(),
        inserted: Vec::new(),
        rejected: Vec::new(),
        queries_served: 0,
        makespan: 0.0,
    };

    for op in 0..params.ops {
        let search = rng.random::<f64>() < params.search_fraction || icur >= inserts.len();
        let start = if search {
            let w = (0..workers).min_by(|&a, &b| worker_free[a].total_cmp(&worker_free[b]).then(a.cmp(&b))).unwrap();
            worker_free[w].max(dispatch)
        } else {
            coord_free.max(dispatch)
        };
        dispatch = start;

        if pending.as_ref().is_some_and(|(_, at)| start >= *at) {
            let (job, at) = pending.take().unwrap();
            let sw = cluster.manager.finish_rebuild(job, &mut cluster.coordinator)?;
            report.switches.push(sw);
            let rw = report.rebuilds.last_mut().unwrap();
            rw.switched_at = Some(at);
            if cluster.manager.state().phase == Phase::Steady {
                rw.steady_at = Some(at);
            }
            coord_free = coord_free.max(at);
        }

        if search {
            let w = (0..workers).min_by(|&a, &b| worker_free[a].total_cmp(&worker_free[b]).then(a.cmp(&b))).unwrap();
            let mut extra = 0.0;
            if cluster.manager.state().phase == Phase::Switching && !cluster.manager.has_acked(w as u32) {
                cluster.manager.acknowledge_epoch(w as u32, &mut cluster.engines[w])?;
                extra = switch_cost(&cluster.engines[w]);
                if cluster.manager.state().phase == Phase::Steady {
                    if let Some(rw) = report.rebuilds.last_mut() {
                        rw.steady_at = Some(start + extra);
                    }
                }
            }
            let idx: Vec<usize> = (0..params.query_batch).map(|j| (qcur + j) % queries.len()).collect();
            qcur = (qcur + params.query_batch) % queries.len();
            let batch = QueryBatch::new(queries.select(&idx), params.k, params.r);
            let buf = cluster.manager.buffer_for(w as u32).cloned();
            let out = super::search_during_rebuild(&mut cluster.engines[w], &batch, buf.as_ref())?;
            let end = start + extra + out.metrics.latency();
            worker_free[w] = end;
            report.queries_served += out.included;
            report.ops.push(OpRecord {
                index: op,
                kind: OpKind::Search,
                worker: Some(w as u32),
                start,
                end,
                items: out.included,
                phase: cluster.manager.state().phase,
                epoch: cluster.manager.state().epoch,
                region: cluster.engines[w].region(),
            });
            continue;
        }

        let n = params.insert_batch.min(inserts.len() - icur);
        let vs = rows(inserts, icur, n);
        let pool: Vec<usize> = (icur..icur + n).collect();
        icur += n;
        let phase = cluster.manager.state().phase;
        let latency = match phase {
            Phase::Steady | Phase::Switching => {
                let out = cluster.coordinator.insert_batch(&vs)?;
                let mut lat = out.metrics.latency();
                let mut unplaced = Vec::new();
                for (j, st) in out.statuses.iter().enumerate() {
                    match st {
                        InsertStatus::Committed { label, .. } | InsertStatus::Pending { label, .. } => {
                            report.inserted.push((*label, pool[j]));
                            if phase == Phase::Switching {
                                cluster.manager.buffer_insert(*label, vs.get(j))?;
                            }
                        }
                        _ => unplaced.push(j),
                    }
                }
                if phase == Phase::Switching {
                    lat += hash_cost(params, n, dim);
                }
                let due = phase == Phase::Steady && params.auto_rebuild && (!unplaced.is_empty() || cluster.coordinator.rebuild_requested());
                if due {
                    cluster.manager.begin_rebuild(dim, metric)?;
                    for &j in &unplaced {
                        let label = cluster.coordinator.reserve_labels(1).start;
                        cluster.manager.buffer_insert(label, vs.get(j))?;
                        report.inserted.push((label, pool[j]));
                    }
                    lat += hash_cost(params, unplaced.len(), dim);
                    let job = cluster.manager.start_rebuild()?;
                    let at = start + lat + rebuild_duration(cluster, params, job.vectors, dim)?;
                    report.rebuilds.push(RebuildWindow {
                        triggered_at: start + lat,
                        switched_at: None,
                        steady_at: None,
                    });
                    pending = Some((job, at));
                } else {
                    report.rejected.extend(unplaced.iter().map(|&j| pool[j]));
                }
                lat
            }
            Phase::Rebuilding => {
                let labels = cluster.coordinator.reserve_labels(n as u64);
                for (j, label) in labels.enumerate() {
                    cluster.manager.buffer_insert(label, vs.get(j))?;
                    report.inserted.push((label, pool[j]));
                }
                hash_cost(params, n, dim)
            }
        };
        coord_free = start + latency;
        report.ops.push(OpRecord {
            index: op,
            kind: OpKind::Insert,
            worker: None,
            start,
            end: coord_free,
            items: n,
            phase,
            epoch: cluster.manager.state().epoch,
            region: cluster.coordinator.region(),
        });
    }

    // Let an unfinished rebuild complete so the final state is switched.
    let mut end = report.ops.iter().map(|o| o.end).fold(0.0, f64::max);
    if let Some((job, at)) = pending.take() {
        let sw = cluster.manager.finish_rebuild(job, &mut cluster.coordinator)?;
        report.switches.push(sw);
        report.rebuilds.last_mut().unwrap().switched_at = Some(at);
        end = end.max(at);
    }
    if cluster.manager.state().phase == Phase::Switching {
        cluster.acknowledge_all()?;
        if let Some(rw) = report.rebuilds.last_mut() {
            rw.steady_at = Some(end);
        }
    }
    report.makespan = report.ops.iter().map(|o| o.end).fold(0.0, f64::max);

    let mut lat: Vec<f64> = report.ops.iter().filter(|o| o.kind == OpKind::Search).map(|o| o.end - o.start).collect();
    lat.sort_by(f64::total_cmp);
    let window = params
        .trace_window
        .unwrap_or_else(|| 10.0 * lat.get(lat.len() / 2).copied().unwrap_or(1e-3))
        .max(f64::MIN_POSITIVE);
    report.window = window;
    let n_windows = (report.makespan / window).ceil().max(1.0) as usize;
    report.trace = (0..n_windows)
        .map(|i| TraceRow {
            window: i,
            t_start: i as f64 * window,
            t_end: (i + 1) as f64 * window,
            queries: 0,
            inserts: 0,
            throughput_qps: 0.0,
            phase: Phase::Steady,
        })
        .collect();
    for o in &report.ops {
        let i = ((o.end / window) as usize).min(n_windows - 1);
        match o.kind {
            OpKind::Search => report.trace[i].queries += o.items,
            OpKind::Insert => report.trace[i].inserts += o.items,
        }
    }
    for row in &mut report.trace {
        row.throughput_qps = row.queries as f64 / window;
        row.phase = report
            .rebuilds
            .iter()
            .find_map(|r| {
                let s = r.switched_at.unwrap_or(f64::INFINITY);
                let t = r.steady_at.unwrap_or(f64::INFINITY);
                if row.t_start >= r.triggered_at && row.t_start < s {
                    Some(Phase::Rebuilding)
                } else if row.t_start >= s && row.t_start < t {
                    Some(Phase::Switching)
                } else {
                    None
                }
            })
            .unwrap_or(Phase::Steady);
    }
    Ok(report)
}
