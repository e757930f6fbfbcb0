//! Benchmark harness: declarative configuration, datasets, persisted
//! deployments and the workload commands behind the CLI.
//!
//! Every number written to a CSV file is a function of the configuration
//! alone (seeded data, simulated clocks); wall-clock build timings go to a
//! separate JSON report.

mod commands;

pub use commands::*;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::build::{BuildParams, BuildReport};
use crate::data::{ground_truth, Mixture, MixtureSpec};
use crate::error::{Error, Result};
use crate::fabric::{CostModel, Fabric};
use crate::insert::InsertParams;
use crate::layout::{read_meta, GlobalMeta};
use crate::query::{EngineParams, RoutingParams, StageCosts};
use crate::rebuild::{LshParams, RebuildParams};
use crate::vector::{load_ivecs, load_xvecs, ElementKind, Metric, VectorStore};

/// Synthetic corpus: a Gaussian mixture. `components = 0` means `2·P`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n: usize,
    pub n_queries: usize,
    /// Vectors held back for insert workloads.
    pub n_inserts: usize,
    pub dim: usize,
    pub components: usize,
    pub spread: f32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n: 10_000,
            n_queries: 1_000,
            n_inserts: 2_000,
            dim: 32,
            components: 0,
            spread: 0.1,
            seed: 7,
        }
    }
}

/// Where vectors come from. File paths (fvecs/bvecs, ivecs ground truth)
/// take precedence over the synthetic spec when `base` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct DataConfig {
    pub base: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    pub ground_truth: Option<PathBuf>,
    /// Insert pool file; without it inserts are drawn from the synthetic mixture.
    pub inserts: Option<PathBuf>,
    pub metric: Metric,
    pub synthetic: SyntheticSpec,
}

/// Workload mix for `mixed` and `rebuild-demo`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixConfig {
    /// Operations per scripted schedule.
    pub ops: usize,
    /// Insert fractions swept by `mixed` (search fraction = 1 - ratio).
    pub insert_ratios: Vec<f64>,
    /// Search fraction of the rebuild trace schedule.
    pub trace_search_fraction: f64,
    pub insert_batch: usize,
    /// Trace bucket width in simulated seconds; absent = automatic.
    pub trace_window: Option<f64>,
    /// Overflow fraction of the deployment the trace runs on; small values
    /// force a rebuild during the trace.
    pub trace_overflow_fraction: f64,
    pub rebuild_threads: usize,
    pub seed: u64,
}

impl Default for MixConfig {
    fn default() -> Self {
        Self {
            ops: 300,
            insert_ratios: vec![0.0, 0.1, 0.2, 0.3, 0.5],
            trace_search_fraction: 0.8,
            insert_batch: 8,
            trace_window: None,
            trace_overflow_fraction: 0.05,
            rebuild_threads: 8,
            seed: 11,
        }
    }
}

/// The single configuration file every command reads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub data: DataConfig,
    pub build: BuildParams,
    pub routing: RoutingParams,
    pub fabric: CostModel,
    pub costs: StageCosts,
    /// Resident sub-indexes per worker as a fraction of P (rounded down).
    pub cache_ratio: f64,
    pub batch_size: usize,
    pub workers: usize,
    pub slo_wait: Option<f64>,
    pub mix: MixConfig,
    /// Buffer used while a rebuild runs; the rebuilt epoch reuses `build`.
    pub lsh: LshParams,
    /// Directory for persisted deployments and CSV output.
    pub output_dir: PathBuf,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            build: BuildParams::default(),
            routing: RoutingParams::default(),
            fabric: CostModel::default(),
            costs: StageCosts::default(),
            cache_ratio: 0.0,
            batch_size: 256,
            workers: 1,
            slo_wait: None,
            mix: MixConfig::default(),
            lsh: LshParams::default(),
            output_dir: PathBuf::from("remann-out"),
        }
    }
}

impl BenchConfig {
    /// Parses TOML, then applies the cost-model environment override.
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: BenchConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.fabric = cfg.fabric.from_env_or()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.fabric.validate()?;
        self.build.gaps.validate()?;
        if self.batch_size == 0 || self.workers == 0 || self.routing.k == 0 || self.routing.r == 0 {
            return Err(Error::Config("batch_size, workers, k and r must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.cache_ratio) {
            return Err(Error::Config("cache_ratio must lie in [0, 1]".into()));
        }
        if self.mix.insert_ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::Config("insert ratios must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn p(&self) -> usize {
        self.build.partition.p
    }

    pub fn cache_capacity(&self) -> usize {
        (self.cache_ratio * self.p() as f64 + 1e-9).floor() as usize
    }

    pub fn engine_params(&self) -> EngineParams {
        EngineParams {
            e_meta: self.routing.e_meta,
            e_sub: self.routing.e_sub,
            cache_capacity: self.cache_capacity(),
            search_workers: 1,
            slo_wait: self.slo_wait,
            costs: self.costs,
            refresh_meta: true,
        }
    }

    pub fn insert_params(&self) -> InsertParams {
        InsertParams {
            cache_capacity: self.cache_capacity().max(1),
            e_meta: self.routing.e_meta,
            costs: self.costs,
        }
    }

    pub fn rebuild_params(&self) -> RebuildParams {
        RebuildParams {
            build: self.build.clone(),
            lsh: self.lsh,
        }
    }

    pub fn mixture_spec(&self) -> MixtureSpec {
        let s = &self.data.synthetic;
        MixtureSpec {
            dim: s.dim,
            components: if s.components == 0 { 2 * self.p() } else { s.components },
            spread: s.spread,
            seed: s.seed,
        }
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.output_dir.join(name)
    }
}

/// Base vectors, queries, an insert pool and (when known) ground truth.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub base: VectorStore,
    pub queries: VectorStore,
    pub inserts: VectorStore,
    /// Exact top-k labels per query.
    pub truth: Option<Vec<Vec<u64>>>,
}

fn load_vectors(path: &Path, metric: Metric) -> Result<VectorStore> {
    let kind = ElementKind::from_extension(path).unwrap_or(ElementKind::F32);
    let mut s = load_xvecs(path, kind, metric)?;
    if metric == Metric::Angular {
        s.normalize();
    }
    Ok(s)
}

/// Loads or generates the configured dataset. Ground truth is read from the
/// ivecs file if given, computed exactly for synthetic data, and omitted
/// otherwise.
pub fn load_dataset(cfg: &BenchConfig) -> Result<Dataset> {
    let metric = cfg.data.metric;
    let k = cfg.routing.k;
    let s = &cfg.data.synthetic;
    let mix = Mixture::new(cfg.mixture_spec())?;
    let Some(base_path) = &cfg.data.base else {
        let base = mix.sample(s.n, s.seed.wrapping_add(1), metric);
        let queries = mix.sample(s.n_queries, s.seed.wrapping_add(2), metric);
        let inserts = mix.sample(s.n_inserts, s.seed.wrapping_add(3), metric);
        let truth = ids(ground_truth(&base, None, &queries, k)?);
        return Ok(Dataset {
            base,
            queries,
            inserts,
            truth: Some(truth),
        });
    };
    let base = load_vectors(base_path, metric)?;
    let queries = match &cfg.data.queries {
        Some(p) => load_vectors(p, metric)?,
        None => return Err(Error::Config("a base file needs a query file".into())),
    };
    let inserts = match &cfg.data.inserts {
        Some(p) => load_vectors(p, metric)?,
        None if base.dim() == mix.spec().dim => mix.sample(s.n_inserts, s.seed.wrapping_add(3), metric),
        None => VectorStore::new(base.dim(), metric),
    };
    let truth = match &cfg.data.ground_truth {
        Some(p) => Some(
            load_ivecs(p)?
                .into_iter()
                .map(|row| row.into_iter().map(|x| x as u64).collect())
                .collect(),
        ),
        None => None,
    };
    Ok(Dataset {
        base,
        queries,
        inserts,
        truth,
    })
}

fn ids(rows: Vec<Vec<crate::vector::Neighbor>>) -> Vec<Vec<u64>> {
    rows.into_iter().map(|r| r.into_iter().map(|n| n.id).collect()).collect()
}

pub const REGION_FILE: &str = "region.bin";
pub const DEPLOYMENT_FILE: &str = "deployment.json";

/// Sidecar describing a persisted region image.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeploymentFile {
    pub format_version: u32,
    pub epoch: u64,
    pub n: usize,
    pub dim: usize,
    pub metric: Metric,
    pub region_bytes: u64,
    /// The committed metadata (offset tables) at save time.
    pub meta: GlobalMeta,
    pub partition_sizes: Vec<usize>,
    pub build_seconds: Option<BuildReport>,
    pub config: BenchConfig,
}

/// A deployment loaded into a fresh simulated fabric.
pub struct Loaded {
    pub fabric: Arc<Fabric>,
    pub region: u32,
    pub file: DeploymentFile,
}

/// Writes the region bytes and sidecar into `dir`.
pub fn save_deployment(fabric: &Fabric, region: u32, mut file: DeploymentFile, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let bytes = fabric.export_region(region)?;
    let (_, meta) = read_meta(fabric, region, None)?;
    file.meta = meta;
    file.region_bytes = bytes.len() as u64;
    fs::write(dir.join(REGION_FILE), bytes)?;
    fs::write(dir.join(DEPLOYMENT_FILE), serde_json::to_vec_pretty(&file)?)?;
    Ok(())
}

/// Imports a saved region into a new fabric with the given cost model.
pub fn load_deployment(dir: &Path, model: CostModel) -> Result<Loaded> {
    let file: DeploymentFile = serde_json::from_slice(&fs::read(dir.join(DEPLOYMENT_FILE))?)?;
    if file.format_version != 1 {
        return Err(Error::Config(format!("unsupported deployment format {}", file.format_version)));
    }
    let bytes = fs::read(dir.join(REGION_FILE))?;
    if bytes.len() as u64 != file.region_bytes {
        return Err(Error::Inconsistent(format!(
            "region file holds {} bytes, sidecar says {}",
            bytes.len(),
            file.region_bytes
        )));
    }
    let fabric = Arc::new(Fabric::new(model));
    let region = fabric.import_region(bytes)?.id;
    read_meta(fabric.as_ref(), region, None)?;
    Ok(Loaded { fabric, region, file })
}

/// Writes serializable rows as CSV with a header.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
