//! The CLI verbs. Each returns a summary and writes its CSV/JSON files under
//! the configured output directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;

use super::{load_dataset, load_deployment, save_deployment, write_csv, BenchConfig, Dataset, DeploymentFile, Loaded};
use crate::build::{build_deployment, BuildParams, BuildReport};
use crate::data::ground_truth;
use crate::error::{Error, Result};
use crate::fabric::{Fabric, RemoteMemory};
use crate::insert::{InsertCoordinator, InsertStatus};
use crate::layout::{fetch_sub, plan_fetch, read_meta, Direction, GlobalMeta};
use crate::model::{calibrate_batch, calibrate_cluster, predict_batch, predict_build, relative_error, ModelParams};
use crate::query::{recall_at_k, QueryBatch, QueryEngine};
use crate::rebuild::schedule::{run_schedule, Cluster, OpKind, ScheduleParams, ScheduleReport};
use crate::rebuild::collect_vectors;
use crate::vector::{save_ivecs, Neighbor, VectorStore};

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let i = ((sorted.len() as f64 * q).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[i]
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn sorted(mut xs: Vec<f64>) -> Vec<f64> {
    xs.sort_by(f64::total_cmp);
    xs
}

// ---------------------------------------------------------------- build

#[derive(Debug, Clone, Serialize)]
pub struct BuildSummary {
    pub dir: PathBuf,
    pub n: usize,
    pub dim: usize,
    pub p: usize,
    pub max_partition: usize,
    pub capacity: usize,
    pub normalized_size_std: f64,
    pub region_bytes: u64,
    pub timings: BuildReport,
}

#[derive(Debug, Clone, Serialize)]
struct PartitionRow {
    sub: usize,
    size: usize,
}

/// Builds the configured dataset into a fresh region and persists it.
pub fn cmd_build(cfg: &BenchConfig) -> Result<BuildSummary> {
    let data = load_dataset(cfg)?;
    build_into(cfg, &data, &cfg.build, &cfg.output_dir)
}

fn build_into(cfg: &BenchConfig, data: &Dataset, params: &BuildParams, dir: &Path) -> Result<BuildSummary> {
    let fabric = Fabric::new(cfg.fabric);
    let dep = build_deployment(&fabric, &data.base, None, params, 0)?;
    let sizes = dep.partition.sizes.clone();
    let file = DeploymentFile {
        format_version: 1,
        epoch: 0,
        n: data.base.len(),
        dim: data.base.dim(),
        metric: data.base.metric(),
        region_bytes: 0,
        meta: dep.meta.clone(),
        partition_sizes: sizes.clone(),
        build_seconds: Some(dep.report),
        config: cfg.clone(),
    };
    save_deployment(&fabric, dep.region.id, file, dir)?;
    let rows: Vec<PartitionRow> = sizes.iter().enumerate().map(|(sub, &size)| PartitionRow { sub, size }).collect();
    write_csv(&dir.join("partitions.csv"), &rows)?;
    fs::write(dir.join("build_report.json"), serde_json::to_vec_pretty(&dep.report)?)?;
    Ok(BuildSummary {
        dir: dir.to_path_buf(),
        n: data.base.len(),
        dim: data.base.dim(),
        p: sizes.len(),
        max_partition: sizes.iter().copied().max().unwrap_or(0),
        capacity: data.base.len().div_ceil(sizes.len().max(1)),
        normalized_size_std: dep.partition.normalized_size_std(),
        region_bytes: dep.region.size,
        timings: dep.report,
    })
}

fn open(cfg: &BenchConfig) -> Result<Loaded> {
    load_deployment(&cfg.output_dir, cfg.fabric).map_err(|e| match e {
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => Error::Config(format!(
            "no deployment in {} (run `build` first)",
            cfg.output_dir.display()
        )),
        e => e,
    })
}

// ---------------------------------------------------------------- query

#[derive(Debug, Clone, Serialize)]
pub struct QueryRow {
    pub batch_id: u64,
    pub worker: u32,
    #[serde(rename = "B")]
    pub b: usize,
    pub k: usize,
    #[serde(rename = "R")]
    pub r: usize,
    pub cache_capacity: usize,
    pub recall: Option<f64>,
    pub latency: f64,
    pub t_meta: f64,
    pub t_net: f64,
    pub t_deser: f64,
    pub t_comp: f64,
    pub t_pipeline: f64,
    pub t_sequential: f64,
    pub fetched: usize,
    pub cache_hits: usize,
    pub bytes_fetched: u64,
    pub degraded: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct QuerySummary {
    pub batches: usize,
    pub queries: usize,
    pub recall: Option<f64>,
    pub mean_latency: f64,
    pub p99_latency: f64,
    pub fetched: usize,
    pub cache_hits: usize,
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub rows: Vec<QueryRow>,
    /// Returned ids per query, in query order.
    #[serde(skip)]
    pub results: Vec<Vec<Neighbor>>,
}

/// Runs every query in batches of `batch_size`, dealing batches round-robin
/// to `workers` engines on the shared fabric.
pub fn run_queries(
    fabric: Arc<dyn RemoteMemory>,
    region: u32,
    cfg: &BenchConfig,
    queries: &VectorStore,
    truth: Option<&[Vec<u64>]>,
) -> Result<QuerySummary> {
    let params = cfg.engine_params();
    let mut engines = (0..cfg.workers)
        .map(|_| QueryEngine::connect(Arc::clone(&fabric), region, params))
        .collect::<Result<Vec<_>>>()?;
    let (k, r) = (cfg.routing.k, cfg.routing.r);
    let mut rows = Vec::new();
    let mut results = Vec::with_capacity(queries.len());
    let mut warnings = Vec::new();
    if truth.is_none() {
        warnings.push("no ground truth: recall omitted".to_string());
    }
    let mut start = 0;
    let mut batch_id = 0u64;
    while start < queries.len() {
        let end = (start + cfg.batch_size).min(queries.len());
        let w = batch_id as usize % engines.len();
        let batch = QueryBatch::new(queries.select(&(start..end).collect::<Vec<_>>()), k, r);
        let out = engines[w].run_batch(&batch)?;
        if out.included < end - start {
            warnings.push(format!("batch {batch_id}: {} queries deferred by SLO truncation", end - start - out.included));
        }
        let got: Vec<Vec<Neighbor>> = out.results.into_iter().map(|q| q.neighbors).collect();
        let recall = truth.map(|t| recall_at_k(&got, &t[start..start + got.len()], k));
        let m = &out.metrics;
        rows.push(QueryRow {
            batch_id,
            worker: w as u32,
            b: got.len(),
            k,
            r,
            cache_capacity: params.cache_capacity,
            recall,
            latency: m.latency(),
            t_meta: m.t_meta,
            t_net: m.t_net,
            t_deser: m.t_deser,
            t_comp: m.t_comp,
            t_pipeline: m.t_pipeline,
            t_sequential: m.t_sequential,
            fetched: m.fetched,
            cache_hits: m.cache_hits,
            bytes_fetched: m.bytes_fetched,
            degraded: m.degraded_queries,
        });
        // Deferred queries open the next batch.
        start += got.len().max(1);
        results.extend(got);
        batch_id += 1;
    }
    let lat = sorted(rows.iter().map(|r| r.latency).collect());
    let recall = truth.map(|t| recall_at_k(&results, &t[..results.len()], k));
    Ok(QuerySummary {
        batches: rows.len(),
        queries: results.len(),
        recall,
        mean_latency: mean(&lat),
        p99_latency: percentile(&lat, 0.99),
        fetched: rows.iter().map(|r| r.fetched).sum(),
        cache_hits: rows.iter().map(|r| r.cache_hits).sum(),
        warnings,
        rows,
        results,
    })
}

/// Queries the persisted deployment; writes `query.csv` and the returned ids
/// as `results.ivecs`.
pub fn cmd_query(cfg: &BenchConfig) -> Result<QuerySummary> {
    let data = load_dataset(cfg)?;
    let loaded = open(cfg)?;
    let truth = current_truth(cfg, &loaded, &data)?;
    let s = run_queries(loaded.fabric.clone(), loaded.region, cfg, &data.queries, truth.as_deref())?;
    write_csv(&cfg.out("query.csv"), &s.rows)?;
    let ids: Vec<Vec<i32>> = s.results.iter().map(|r| r.iter().map(|n| n.id as i32).collect()).collect();
    save_ivecs(&ids, cfg.out("results.ivecs"))?;
    Ok(s)
}

/// Ground truth against what is stored now: the dataset's own truth while
/// the deployment holds exactly the base set, otherwise recomputed over the
/// stored vectors (after inserts).
fn current_truth(cfg: &BenchConfig, loaded: &Loaded, data: &Dataset) -> Result<Option<Vec<Vec<u64>>>> {
    let (_, meta) = read_meta(loaded.fabric.as_ref(), loaded.region, None)?;
    if !has_inserts(&meta, data) {
        return Ok(data.truth.clone());
    }
    let (store, labels) = collect_vectors(loaded.fabric.as_ref(), loaded.region)?;
    Ok(Some(
        ground_truth(&store, Some(&labels), &data.queries, cfg.routing.k)?
            .into_iter()
            .map(|r| r.into_iter().map(|n| n.id).collect())
            .collect(),
    ))
}

fn has_inserts(meta: &GlobalMeta, data: &Dataset) -> bool {
    meta.next_label > data.base.len() as u64 || meta.subs.iter().any(|s| s.version > 0)
}

/// Recall recomputed from a stored `results.ivecs` against `truth`.
pub fn recompute_recall(results: impl AsRef<Path>, truth: &[Vec<u64>], k: usize) -> Result<f64> {
    let rows = crate::vector::load_ivecs(results)?;
    let got: Vec<Vec<Neighbor>> = rows
        .into_iter()
        .map(|r| r.into_iter().map(|id| Neighbor::new(id as u64, 0.0)).collect())
        .collect();
    if got.len() > truth.len() {
        return Err(Error::invalid("more result rows than ground-truth rows"));
    }
    Ok(recall_at_k(&got, &truth[..got.len()], k))
}

#[derive(Debug, Clone, Serialize)]
pub struct CacheSweepRow {
    pub cache_ratio: f64,
    pub cache_capacity: usize,
    pub mean_latency: f64,
    pub p99_latency: f64,
    pub fetched: usize,
    pub cache_hits: usize,
    pub recall: Option<f64>,
}

/// Query latency at each cache ratio; writes `cache_sweep.csv`.
pub fn cmd_cache_sweep(cfg: &BenchConfig, ratios: &[f64]) -> Result<Vec<CacheSweepRow>> {
    let data = load_dataset(cfg)?;
    let mut rows = Vec::new();
    for &ratio in ratios {
        let loaded = open(cfg)?;
        let truth = current_truth(cfg, &loaded, &data)?;
        let c = BenchConfig {
            cache_ratio: ratio,
            ..cfg.clone()
        };
        c.validate()?;
        let s = run_queries(loaded.fabric.clone(), loaded.region, &c, &data.queries, truth.as_deref())?;
        rows.push(CacheSweepRow {
            cache_ratio: ratio,
            cache_capacity: c.cache_capacity(),
            mean_latency: s.mean_latency,
            p99_latency: s.p99_latency,
            fetched: s.fetched,
            cache_hits: s.cache_hits,
            recall: s.recall,
        });
    }
    write_csv(&cfg.out("cache_sweep.csv"), &rows)?;
    Ok(rows)
}

// ---------------------------------------------------------------- insert

#[derive(Debug, Clone, Serialize)]
pub struct InsertRow {
    pub batch: usize,
    pub vectors: usize,
    pub committed: usize,
    pub pending: usize,
    pub rebuild_required: usize,
    pub failed: usize,
    pub subs_touched: usize,
    pub fetched: usize,
    pub commits: usize,
    pub round_trips: usize,
    pub bytes_written: u64,
    pub latency: f64,
    pub overflow_used: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct InsertSummary {
    pub inserted: usize,
    pub rebuild_required: usize,
    pub first_rebuild_required_at: Option<usize>,
    pub mean_batch_latency: f64,
    #[serde(skip)]
    pub rows: Vec<InsertRow>,
}

/// Inserts the configured pool in batches into the persisted deployment and
/// saves the updated region; writes `insert.csv`.
pub fn cmd_insert(cfg: &BenchConfig) -> Result<InsertSummary> {
    let data = load_dataset(cfg)?;
    let loaded = open(cfg)?;
    let mut co = InsertCoordinator::connect(loaded.fabric.clone(), loaded.region, cfg.insert_params())?;
    let step = cfg.mix.insert_batch.max(1);
    let mut rows = Vec::new();
    let mut first = None;
    let mut done = 0;
    for (batch, start) in (0..data.inserts.len()).step_by(step).enumerate() {
        let end = (start + step).min(data.inserts.len());
        let out = co.insert_batch(&data.inserts.select(&(start..end).collect::<Vec<_>>()))?;
        let count = |f: fn(&InsertStatus) -> bool| out.statuses.iter().filter(|s| f(s)).count();
        let rebuild = count(|s| matches!(s, InsertStatus::RebuildRequired));
        if rebuild > 0 && first.is_none() {
            let j = out.statuses.iter().position(|s| matches!(s, InsertStatus::RebuildRequired)).unwrap();
            first = Some(start + j);
        }
        let m = &out.metrics;
        rows.push(InsertRow {
            batch,
            vectors: end - start,
            committed: count(|s| matches!(s, InsertStatus::Committed { .. })),
            pending: count(|s| matches!(s, InsertStatus::Pending { .. })),
            rebuild_required: rebuild,
            failed: count(|s| matches!(s, InsertStatus::Failed(_))),
            subs_touched: m.subs_touched,
            fetched: m.fetched,
            commits: m.commits,
            round_trips: m.round_trips,
            bytes_written: m.bytes_written,
            latency: m.latency(),
            overflow_used: co.meta().groups.iter().map(|g| g.used_forward + g.used_backward).sum(),
        });
        done = end;
    }
    if co.has_pending() {
        co.flush()?;
    }
    let mut file = loaded.file.clone();
    file.n = data.base.len() + done;
    save_deployment(&loaded.fabric, loaded.region, file, &cfg.output_dir)?;
    write_csv(&cfg.out("insert.csv"), &rows)?;
    let lat: Vec<f64> = rows.iter().map(|r| r.latency).collect();
    Ok(InsertSummary {
        inserted: rows.iter().map(|r| r.committed + r.pending).sum(),
        rebuild_required: rows.iter().map(|r| r.rebuild_required).sum(),
        first_rebuild_required_at: first,
        mean_batch_latency: mean(&lat),
        rows,
    })
}

// ---------------------------------------------------------------- mixed / rebuild

fn schedule_params(cfg: &BenchConfig, search_fraction: f64) -> ScheduleParams {
    ScheduleParams {
        ops: cfg.mix.ops,
        search_fraction,
        query_batch: cfg.batch_size,
        insert_batch: cfg.mix.insert_batch,
        k: cfg.routing.k,
        r: cfg.routing.r,
        workers: cfg.workers,
        engine: cfg.engine_params(),
        insert: cfg.insert_params(),
        rebuild: cfg.rebuild_params(),
        auto_rebuild: true,
        rebuild_threads: cfg.mix.rebuild_threads,
        rebuild_calibration: Default::default(),
        trace_window: cfg.mix.trace_window,
        seed: cfg.mix.seed,
    }
}

fn run_on(loaded: &Loaded, cfg: &BenchConfig, data: &Dataset, params: &ScheduleParams) -> Result<(Cluster, ScheduleReport)> {
    let fabric: Arc<dyn RemoteMemory> = loaded.fabric.clone();
    let mut cluster = Cluster::connect(
        fabric,
        loaded.region,
        loaded.file.epoch,
        cfg.workers,
        params.engine,
        params.insert,
        params.rebuild.clone(),
    )?;
    let report = run_schedule(&mut cluster, &data.queries, &data.inserts, params)?;
    Ok((cluster, report))
}

#[derive(Debug, Clone, Serialize)]
pub struct MixedRow {
    pub insert_ratio: f64,
    #[serde(rename = "B")]
    pub b: usize,
    pub insert_batch: usize,
    pub search_batches: usize,
    pub insert_batches: usize,
    pub mean_search_latency: f64,
    pub p99_search_latency: f64,
    pub mean_insert_latency: f64,
    pub queries_served: usize,
    pub vectors_inserted: usize,
    pub rebuilds: usize,
    pub makespan: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MixedSummary {
    pub rows: Vec<MixedRow>,
    pub trace: RebuildDemo,
}

/// Batch latency against insert ratio (each ratio on a fresh copy of the
/// persisted deployment), plus the rebuild throughput trace. Writes
/// `mixed.csv`, `mixed_trace.csv` and `rebuild_windows.csv`.
pub fn cmd_mixed(cfg: &BenchConfig) -> Result<MixedSummary> {
    let data = load_dataset(cfg)?;
    let mut rows = Vec::new();
    for &ratio in &cfg.mix.insert_ratios {
        let loaded = open(cfg)?;
        let params = schedule_params(cfg, 1.0 - ratio);
        let (_, rep) = run_on(&loaded, cfg, &data, &params)?;
        let lat = |k: OpKind| sorted(rep.ops.iter().filter(|o| o.kind == k).map(|o| o.end - o.start).collect());
        let (s, i) = (lat(OpKind::Search), lat(OpKind::Insert));
        rows.push(MixedRow {
            insert_ratio: ratio,
            b: cfg.batch_size,
            insert_batch: cfg.mix.insert_batch,
            search_batches: s.len(),
            insert_batches: i.len(),
            mean_search_latency: mean(&s),
            p99_search_latency: percentile(&s, 0.99),
            mean_insert_latency: mean(&i),
            queries_served: rep.queries_served,
            vectors_inserted: rep.inserted.len(),
            rebuilds: rep.rebuilds.len(),
            makespan: rep.makespan,
        });
    }
    write_csv(&cfg.out("mixed.csv"), &rows)?;
    let trace = rebuild_trace(cfg, &data, "mixed_trace.csv")?;
    Ok(MixedSummary { rows, trace })
}

#[derive(Debug, Clone, Serialize)]
pub struct RebuildDemo {
    pub rebuilds: usize,
    pub windows: usize,
    pub window_seconds: f64,
    pub zero_throughput_windows: Vec<usize>,
    pub rebuild_windows: usize,
    pub min_throughput_during_rebuild: f64,
    pub inserted: usize,
    pub rejected: usize,
    /// Accepted inserts missing from, or wrong in, the final epoch.
    pub audit_missing: usize,
    pub audit_checked: usize,
    pub recall_after: f64,
    pub recall_fresh: f64,
    #[serde(skip)]
    pub report: Option<ScheduleReport>,
}

/// The 80/20 (configurable) schedule on a deployment built with a small
/// overflow so that inserts exhaust it and trigger a rebuild; then a
/// membership audit and recall against a from-scratch build on the same
/// final data. Writes `rebuild_demo.json`.
pub fn cmd_rebuild_demo(cfg: &BenchConfig) -> Result<RebuildDemo> {
    let data = load_dataset(cfg)?;
    rebuild_trace(cfg, &data, "rebuild_trace.csv")
}

fn rebuild_trace(cfg: &BenchConfig, data: &Dataset, trace_file: &str) -> Result<RebuildDemo> {
    let fabric = Arc::new(Fabric::new(cfg.fabric));
    let mut params = cfg.build.clone();
    params.gaps.overflow_fraction = cfg.mix.trace_overflow_fraction;
    let dep = build_deployment(fabric.as_ref(), &data.base, None, &params, 0)?;
    let loaded = Loaded {
        fabric: fabric.clone(),
        region: dep.region.id,
        file: DeploymentFile {
            format_version: 1,
            epoch: 0,
            n: data.base.len(),
            dim: data.base.dim(),
            metric: data.base.metric(),
            region_bytes: dep.region.size,
            meta: dep.meta,
            partition_sizes: dep.partition.sizes,
            build_seconds: None,
            config: cfg.clone(),
        },
    };
    let sp = schedule_params(cfg, cfg.mix.trace_search_fraction);
    let (mut cluster, rep) = run_on(&loaded, cfg, data, &sp)?;
    let demo = audit(cfg, data, &mut cluster, rep)?;
    let r = demo.report.as_ref().unwrap();
    write_csv(&cfg.out(trace_file), &r.trace)?;
    write_csv(&cfg.out("rebuild_windows.csv"), &r.rebuilds)?;
    fs::write(cfg.out("rebuild_demo.json"), serde_json::to_vec_pretty(&demo)?)?;
    Ok(demo)
}

fn audit(cfg: &BenchConfig, data: &Dataset, cluster: &mut Cluster, rep: ScheduleReport) -> Result<RebuildDemo> {
    let region = cluster.manager.state().region;
    let fabric = cluster.fabric.clone();
    let (store, labels) = collect_vectors(fabric.as_ref(), region)?;
    let pos: BTreeMap<u64, usize> = labels.iter().enumerate().map(|(i, &l)| (l, i)).collect();
    let mut expected: Vec<(u64, &[f32])> = (0..data.base.len()).map(|i| (i as u64, data.base.get(i))).collect();
    expected.extend(rep.inserted.iter().map(|&(l, j)| (l, data.inserts.get(j))));
    let missing = expected
        .iter()
        .filter(|(l, v)| pos.get(l).is_none_or(|&i| store.get(i) != *v))
        .count();
    let duplicate = labels.len() - labels.iter().collect::<BTreeSet<_>>().len();

    let truth: Vec<Vec<u64>> = ground_truth(&store, Some(&labels), &data.queries, cfg.routing.k)?
        .into_iter()
        .map(|r| r.into_iter().map(|n| n.id).collect())
        .collect();
    let after = run_queries(fabric, region, cfg, &data.queries, Some(&truth))?.recall.unwrap_or(0.0);
    let fresh_fabric = Arc::new(Fabric::new(cfg.fabric));
    let fresh = build_deployment(fresh_fabric.as_ref(), &store, Some(&labels), &cfg.build, 0)?;
    let fresh_recall = run_queries(fresh_fabric, fresh.region.id, cfg, &data.queries, Some(&truth))?.recall.unwrap_or(0.0);

    let during = rep.windows_during_rebuild();
    Ok(RebuildDemo {
        rebuilds: rep.rebuilds.len(),
        windows: rep.trace.len(),
        window_seconds: rep.window,
        zero_throughput_windows: rep.zero_throughput_windows(),
        rebuild_windows: during.len(),
        min_throughput_during_rebuild: during.iter().map(|w| w.throughput_qps).fold(f64::INFINITY, f64::min),
        inserted: rep.inserted.len(),
        rejected: rep.rejected.len(),
        audit_missing: missing + duplicate,
        audit_checked: expected.len(),
        recall_after: after,
        recall_fresh: fresh_recall,
        report: Some(rep),
    })
}

// ---------------------------------------------------------------- model

#[derive(Debug, Clone, Serialize)]
pub struct ModelRow {
    pub term: &'static str,
    pub predicted: f64,
    pub measured: Option<f64>,
    pub relative_error: Option<f64>,
}

/// Model predictions for the persisted deployment next to one simulated
/// cold batch (cache disabled) and the recorded build timings. The batch
/// constants are calibrated on that same batch, so `t_comp`/`t_deser`
/// match by construction and the informative rows are `t_net`,
/// `t_pipeline` and `t`. Build terms are calibrated on the recorded
/// clustering time. Writes `model.csv`.
pub fn cmd_model(cfg: &BenchConfig) -> Result<Vec<ModelRow>> {
    let data = load_dataset(cfg)?;
    let loaded = open(cfg)?;
    let meta = &loaded.file.meta;
    let b = cfg.batch_size.min(data.queries.len());
    let mut engine = QueryEngine::connect(
        loaded.fabric.clone(),
        loaded.region,
        crate::query::EngineParams {
            cache_capacity: 0,
            ..cfg.engine_params()
        },
    )?;
    let batch = QueryBatch::new(data.queries.select(&(0..b).collect::<Vec<_>>()), cfg.routing.k, cfg.routing.r);
    // With the cache disabled planning has no side effects, so the plan
    // matches the one `run_batch` makes (which also charges routing).
    let plan = engine.plan(&batch)?;
    let out = engine.run_batch(&batch)?;
    let m = &out.metrics;
    let bytes: u64 = plan
        .fetch_list
        .iter()
        .map(|&s| plan_fetch(meta, loaded.region, s).map(|p| p.bytes()))
        .sum::<Result<u64>>()?;
    let pf = plan.fetch_list.len().max(1);
    let cm = cfg.fabric;
    let mut mp = ModelParams {
        n: loaded.file.n,
        d: loaded.file.dim,
        p: meta.p(),
        k: cfg.routing.k,
        e_build: cfg.build.sub_hnsw.e_build,
        e_meta: cfg.routing.e_meta,
        e_sub: cfg.routing.e_sub,
        b,
        s: bytes as f64 / pf as f64,
        p_fetch: plan.fetch_list.len(),
        w_net: cm.bandwidth,
        n_threads: 1,
        i_max: cfg.build.partition.i_max,
        c_sample: cfg.build.partition.c_sample,
        l: cfg.build.partition.l,
        r: cfg.routing.r,
        pairs: Some(plan.demand.values().map(Vec::len).sum()),
        net_latency: cm.rtt + cm.per_op_overhead * 2.0,
        include_assignment_terms: false,
        calibration: Default::default(),
    };
    mp.calibration = calibrate_batch(&mp, m.t_comp, m.t_deser)?;
    let pred = predict_batch(&mp)?;
    let row = |term, predicted: f64, measured: Option<f64>| ModelRow {
        term,
        predicted,
        measured,
        relative_error: measured.filter(|&x| x > 0.0).map(|x| relative_error(predicted, x)),
    };
    let mut rows = vec![
        row("t_meta", pred.t_meta, Some(m.t_meta)),
        row("t_net", pred.t_net, Some(m.t_net)),
        row("t_deser", pred.t_deser, Some(m.t_deser)),
        row("t_comp", pred.t_comp, Some(m.t_comp)),
        row("t_pipeline", pred.t_pipeline, Some(m.t_pipeline)),
        row("t", pred.t, Some(m.latency())),
    ];
    // Build terms: calibrated on the recorded clustering time, so `t_cluster`
    // matches and `t_sub`/`t_meta_build` test the model's shape.
    let measured = loaded.file.build_seconds;
    let mut bp = ModelParams {
        n_threads: rayon::current_num_threads(),
        calibration: Default::default(),
        ..mp
    };
    if let Some(r) = measured.filter(|r| r.t_partition > 0.0) {
        bp.calibration = calibrate_cluster(&bp, r.t_partition)?;
    }
    let build = predict_build(&bp)?;
    rows.push(row("t_cluster", build.t_cluster, measured.map(|r| r.t_partition)));
    rows.push(row("t_sub", build.t_sub, measured.map(|r| r.t_sub)));
    rows.push(row("t_meta_build", build.t_meta_build, measured.map(|r| r.t_meta_build)));
    rows.push(row("t_build", build.t_build, None));
    write_csv(&cfg.out("model.csv"), &rows)?;
    Ok(rows)
}

// ---------------------------------------------------------------- inspect

#[derive(Debug, Clone, Serialize)]
pub struct LayoutRow {
    pub sub: usize,
    pub group: usize,
    pub direction: &'static str,
    pub base_offset: u64,
    pub base_len: u64,
    pub version: u64,
    pub ntotal: usize,
    pub overflow_offset: u64,
    pub overflow_len: u64,
    pub overflow_used_by_sub: u64,
    pub fetch_ranges: usize,
    pub fetch_bytes: u64,
}

/// One row per sub: where its image lives and how it is fetched. Writes
/// `layout.csv`.
pub fn cmd_inspect_layout(cfg: &BenchConfig) -> Result<(GlobalMeta, Vec<LayoutRow>)> {
    let loaded = open(cfg)?;
    let (_, meta) = read_meta(loaded.fabric.as_ref(), loaded.region, None)?;
    let mut rows = Vec::with_capacity(meta.p());
    for sub in 0..meta.p() {
        let e = meta.sub(sub)?;
        let g = &meta.groups[GlobalMeta::group_of(sub)];
        let plan = plan_fetch(&meta, loaded.region, sub)?;
        let (idx, _) = fetch_sub(loaded.fabric.as_ref(), loaded.region, &meta, sub)?;
        rows.push(LayoutRow {
            sub,
            group: GlobalMeta::group_of(sub),
            direction: match GlobalMeta::direction(sub) {
                Direction::Forward => "forward",
                Direction::Backward => "backward",
            },
            base_offset: e.base_offset,
            base_len: e.base_len,
            version: e.version,
            ntotal: idx.ntotal(),
            overflow_offset: g.overflow_offset,
            overflow_len: g.overflow_len,
            overflow_used_by_sub: meta.overflow_used(sub),
            fetch_ranges: plan.ranges.len(),
            fetch_bytes: plan.bytes(),
        });
    }
    write_csv(&cfg.out("layout.csv"), &rows)?;
    Ok((meta, rows))
}
