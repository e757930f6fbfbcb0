//! Python bindings: an in-process deployment (simulated fabric, one query
//! engine, an insert coordinator and rebuilds), the exact oracle, the cost
//! model and the benchmark verbs.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use remann_core::bench::{self, BenchConfig};
use remann_core::build::{build_deployment, BuildParams};
use remann_core::data::ground_truth as exact_topk;
use remann_core::fabric::{CostModel, Fabric, RemoteMemory};
use remann_core::hnsw::HnswParams;
use remann_core::insert::{InsertCoordinator, InsertParams, InsertStatus};
use remann_core::layout::{read_meta, GapPolicy};
use remann_core::model::{predict_batch as model_predict_batch, predict_build as model_predict_build, ModelParams};
use remann_core::partition::PartitionParams;
use remann_core::query::{recall_at_k as core_recall, EngineParams, QueryBatch, QueryEngine};
use remann_core::rebuild::{EpochManager, RebuildParams};
use remann_core::vector::{Metric, Neighbor, VectorStore};
use remann_core::Error;

fn err(e: Error) -> PyErr {
    match e {
        Error::InvalidArgument(_) | Error::DimensionMismatch { .. } | Error::Config(_) => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn metric(name: &str) -> PyResult<Metric> {
    match name {
        "euclidean" | "l2" => Ok(Metric::Euclidean),
        "angular" | "cosine" => Ok(Metric::Angular),
        other => Err(PyValueError::new_err(format!("unknown metric {other:?}"))),
    }
}

fn store(rows: &[Vec<f32>], m: Metric) -> PyResult<VectorStore> {
    if rows.is_empty() {
        return Err(PyValueError::new_err("need at least one vector"));
    }
    let mut s = VectorStore::from_rows(rows, m).map_err(err)?;
    if m == Metric::Angular {
        s.normalize();
    }
    Ok(s)
}

fn pairs(rows: Vec<Vec<Neighbor>>) -> Vec<Vec<(u64, f32)>> {
    rows.into_iter().map(|r| r.into_iter().map(|n| (n.id, n.distance)).collect()).collect()
}

struct Inner {
    fabric: Arc<Fabric>,
    engine: QueryEngine,
    coordinator: InsertCoordinator,
    manager: EpochManager,
    dim: usize,
    metric: Metric,
    last: HashMap<String, f64>,
}

/// A partitioned index deployed into a private simulated fabric. Methods
/// hold the GIL: releasing it while the inner lock is held could deadlock
/// against another Python thread waiting on that lock.
#[pyclass(module = "remann_py")]
struct Index {
    inner: Mutex<Inner>,
}

impl Index {
    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }
}

#[pymethods]
impl Index {
    /// Builds over `vectors` (a sequence of equal-length float sequences).
    #[new]
    #[pyo3(signature = (vectors, p=20, m=16, e_build=100, e_sub=96, e_meta=32, cache=2, gap=0.2, overflow=0.25, metric="euclidean", seed=42))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        vectors: Vec<Vec<f32>>,
        p: usize,
        m: usize,
        e_build: usize,
        e_sub: usize,
        e_meta: usize,
        cache: usize,
        gap: f64,
        overflow: f64,
        metric: &str,
        seed: u64,
    ) -> PyResult<Self> {
        let met = self::metric(metric)?;
        let base = store(&vectors, met)?;
        let params = BuildParams {
            partition: PartitionParams {
                p,
                rng_seed: seed,
                ..Default::default()
            },
            sub_hnsw: HnswParams {
                e_build,
                ..HnswParams::with_m(m)
            },
            gaps: GapPolicy {
                internal_gap_fraction: gap,
                overflow_fraction: overflow,
            },
            ..Default::default()
        };
        let fabric = Arc::new(Fabric::new(CostModel::default()));
        let dep = build_deployment(fabric.as_ref(), &base, None, &params, 0).map_err(err)?;
        let shared: Arc<dyn RemoteMemory> = fabric.clone();
        let engine = QueryEngine::connect(
            shared.clone(),
            dep.region.id,
            EngineParams {
                e_meta,
                e_sub,
                cache_capacity: cache,
                ..Default::default()
            },
        )
        .map_err(err)?;
        let coordinator = InsertCoordinator::connect(
            shared.clone(),
            dep.region.id,
            InsertParams {
                cache_capacity: cache.max(1),
                e_meta,
                ..Default::default()
            },
        )
        .map_err(err)?;
        let manager = EpochManager::new(
            shared,
            dep.region.id,
            0,
            &[0],
            RebuildParams {
                build: params,
                lsh: Default::default(),
            },
        )
        .map_err(err)?;
        Ok(Self {
            inner: Mutex::new(Inner {
                fabric,
                engine,
                coordinator,
                manager,
                dim: base.dim(),
                metric: met,
                last: HashMap::new(),
            }),
        })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.lock().dim
    }

    #[getter]
    fn epoch(&self) -> u64 {
        self.lock().manager.state().epoch
    }

    /// Top-`k` `(label, distance)` lists, probing `r` partitions per query.
    #[pyo3(signature = (queries, k=10, r=4))]
    fn search(&self, queries: Vec<Vec<f32>>, k: usize, r: usize) -> PyResult<Vec<Vec<(u64, f32)>>> {
        let mut guard = self.lock();
        let g: &mut Inner = &mut guard;
        let q = store(&queries, g.metric)?;
        let out = g.engine.run_batch(&QueryBatch::new(q, k, r)).map_err(err)?;
        let m = &out.metrics;
        g.last = HashMap::from([
            ("latency".to_string(), m.latency()),
            ("t_meta".into(), m.t_meta),
            ("t_net".into(), m.t_net),
            ("t_deser".into(), m.t_deser),
            ("t_comp".into(), m.t_comp),
            ("t_pipeline".into(), m.t_pipeline),
            ("t_sequential".into(), m.t_sequential),
            ("fetched".into(), m.fetched as f64),
            ("cache_hits".into(), m.cache_hits as f64),
        ]);
        Ok(pairs(out.results.into_iter().map(|r| r.neighbors).collect()))
    }

    /// Simulated metrics of the most recent `search`.
    fn last_metrics(&self) -> HashMap<String, f64> {
        self.lock().last.clone()
    }

    /// Inserts vectors; returns each one's label, or `None` if the layout had
    /// no room (a rebuild is then required).
    fn insert(&self, vectors: Vec<Vec<f32>>) -> PyResult<Vec<Option<u64>>> {
        let mut guard = self.lock();
        let g: &mut Inner = &mut guard;
        let v = store(&vectors, g.metric)?;
        let out = g.coordinator.insert_batch(&v).map_err(err)?;
        Ok(out
            .statuses
            .iter()
            .map(|s| match s {
                InsertStatus::Committed { label, .. } | InsertStatus::Pending { label, .. } => Some(*label),
                _ => None,
            })
            .collect())
    }

    #[getter]
    fn rebuild_requested(&self) -> bool {
        self.lock().coordinator.rebuild_requested()
    }

    /// Rebuilds every stored vector into a fresh epoch and switches to it.
    fn rebuild(&self) -> PyResult<HashMap<String, u64>> {
        let mut guard = self.lock();
        let g: &mut Inner = &mut guard;
        let Inner {
            engine,
            coordinator,
            manager,
            dim,
            metric,
            ..
        } = g;
        manager.begin_rebuild(*dim, *metric).map_err(err)?;
        let sw = manager.run_rebuild(coordinator).map_err(err)?;
        manager.acknowledge_epoch(0, engine).map_err(err)?;
        Ok(HashMap::from([
            ("epoch".to_string(), sw.epoch),
            ("old_region".into(), sw.old_region as u64),
            ("new_region".into(), sw.new_region as u64),
            ("vectors".into(), sw.rebuilt_vectors as u64),
        ]))
    }

    /// Cumulative fabric counters.
    fn stats(&self) -> HashMap<String, f64> {
        let s = self.lock().fabric.stats();
        HashMap::from([
            ("reads".to_string(), s.reads as f64),
            ("writes".into(), s.writes as f64),
            ("doorbell_batches".into(), s.doorbell_batches as f64),
            ("round_trips".into(), s.round_trips() as f64),
            ("bytes_moved".into(), s.bytes_moved as f64),
            ("simulated_time".into(), s.simulated_time),
        ])
    }

    /// Per-sub `(base_offset, base_len, version)` of the committed layout.
    fn layout(&self) -> PyResult<Vec<(u64, u64, u64)>> {
        let g = self.lock();
        let (_, meta) = read_meta(g.fabric.as_ref(), g.engine.region(), None).map_err(err)?;
        Ok(meta.subs.iter().map(|s| (s.base_offset, s.base_len, s.version)).collect())
    }
}

/// Exact top-`k` `(row, distance)` lists of `queries` against `base`.
#[pyfunction]
#[pyo3(signature = (base, queries, k=10, metric="euclidean"))]
fn ground_truth(py: Python<'_>, base: Vec<Vec<f32>>, queries: Vec<Vec<f32>>, k: usize, metric: &str) -> PyResult<Vec<Vec<(u64, f32)>>> {
    let m = self::metric(metric)?;
    let (b, q) = (store(&base, m)?, store(&queries, m)?);
    py.detach(|| exact_topk(&b, None, &q, k).map(pairs).map_err(err))
}

/// Mean recall@k of result id lists against true id lists.
#[pyfunction]
fn recall_at_k(results: Vec<Vec<u64>>, truth: Vec<Vec<u64>>, k: usize) -> PyResult<f64> {
    if results.len() != truth.len() {
        return Err(PyValueError::new_err("results and truth differ in length"));
    }
    let r: Vec<Vec<Neighbor>> = results
        .into_iter()
        .map(|ids| ids.into_iter().map(|id| Neighbor::new(id, 0.0)).collect())
        .collect();
    Ok(core_recall(&r, &truth, k))
}

fn model_params(json: Option<&str>) -> PyResult<ModelParams> {
    match json {
        None => Ok(ModelParams::default()),
        Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string())),
    }
}

/// Batch-latency prediction. `params` is a JSON object of model symbols
/// (missing keys take defaults); returns the terms in seconds.
#[pyfunction]
#[pyo3(signature = (params=None))]
fn predict_batch(params: Option<&str>) -> PyResult<HashMap<String, f64>> {
    let p = model_predict_batch(&model_params(params)?).map_err(err)?;
    Ok(HashMap::from([
        ("t_meta".to_string(), p.t_meta),
        ("t_net".into(), p.t_net),
        ("t_deser".into(), p.t_deser),
        ("t_comp".into(), p.t_comp),
        ("t_pipeline".into(), p.t_pipeline),
        ("t".into(), p.t),
        ("max_stage".into(), p.max_stage()),
        ("stage_sum".into(), p.stage_sum()),
    ]))
}

/// Indexing-time prediction; same `params` convention as `predict_batch`.
#[pyfunction]
#[pyo3(signature = (params=None))]
fn predict_build(params: Option<&str>) -> PyResult<HashMap<String, f64>> {
    let p = model_predict_build(&model_params(params)?).map_err(err)?;
    Ok(HashMap::from([
        ("t_init".to_string(), p.t_init),
        ("t_cluster".into(), p.t_cluster),
        ("t_sub".into(), p.t_sub),
        ("t_meta_build".into(), p.t_meta_build),
        ("t_build".into(), p.t_build),
    ]))
}

/// The default benchmark configuration as TOML.
#[pyfunction]
fn default_config() -> PyResult<String> {
    BenchConfig::default().to_toml().map_err(err)
}

/// Runs a benchmark verb (`build`, `query`, `insert`, `mixed`,
/// `rebuild-demo`, `model`, `inspect-layout`) with a TOML config; returns
/// its JSON summary. Files go to `output_dir` (overridable with `out`).
#[pyfunction]
#[pyo3(signature = (verb, config="", out=None))]
fn run(py: Python<'_>, verb: &str, config: &str, out: Option<PathBuf>) -> PyResult<String> {
    let mut cfg = BenchConfig::from_toml(config).map_err(err)?;
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    let verb = verb.to_string();
    py.detach(move || {
        let json = match verb.as_str() {
            "build" => serde_json::to_string(&bench::cmd_build(&cfg).map_err(err)?),
            "query" => serde_json::to_string(&bench::cmd_query(&cfg).map_err(err)?),
            "insert" => serde_json::to_string(&bench::cmd_insert(&cfg).map_err(err)?),
            "mixed" => serde_json::to_string(&bench::cmd_mixed(&cfg).map_err(err)?),
            "rebuild-demo" => serde_json::to_string(&bench::cmd_rebuild_demo(&cfg).map_err(err)?),
            "model" => serde_json::to_string(&bench::cmd_model(&cfg).map_err(err)?),
            "inspect-layout" => serde_json::to_string(&bench::cmd_inspect_layout(&cfg).map_err(err)?.1),
            other => return Err(PyValueError::new_err(format!("unknown verb {other:?}"))),
        };
        json.map_err(|e| PyRuntimeError::new_err(e.to_string()))
    })
}

#[pymodule]
fn remann_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Index>()?;
    m.add_function(wrap_pyfunction!(ground_truth, m)?)?;
    m.add_function(wrap_pyfunction!(recall_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(predict_batch, m)?)?;
    m.add_function(wrap_pyfunction!(predict_build, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
