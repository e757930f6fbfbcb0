//! Epoch-based shadow rebuilds.
//!
//! When some group overflow is exhausted the [`EpochManager`] moves from
//! `Steady` to `Rebuilding`: fresh inserts go to an [`LshBuffer`] that
//! search workers scan alongside the old epoch, while the union of all
//! committed and buffered vectors is re-partitioned and built into a newly
//! registered region. The switch writes `[epoch][region]` to a small root
//! region in one write (`Switching`), moves the insert coordinator over and
//! re-inserts whatever was buffered after the rebuild's snapshot. Each worker
//! then acknowledges, clearing its cache and loading the new metadata; after
//! the last acknowledgment the old region is freed (`Steady`).

pub mod schedule;

use std::collections::BTreeSet;
use std::sync::Arc;
use std::thread::JoinHandle;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::build::{build_deployment, BuildParams, Deployment};
use crate::error::{Error, Result};
use crate::fabric::{RegionHandle, RemoteMemory};
use crate::insert::InsertCoordinator;
use crate::layout::{fetch_sub, read_meta, GlobalMeta};
use crate::query::{merge_topk, BatchOutcome, QueryBatch, QueryEngine};
use crate::vector::{distance_unchecked, Metric, Neighbor, VectorStore};

/// True iff a rebuild is due: a placement failed or some overflow is full.
pub fn maybe_trigger(meta: &GlobalMeta) -> bool {
    meta.rebuild_requested || meta.any_overflow_full()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Steady,
    Rebuilding,
    Switching,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct EpochState {
    pub epoch: u64,
    pub region: u32,
    pub phase: Phase,
}

pub const ROOT_LEN: u64 = 16;

/// Reads the committed `(epoch, region)` from a root region.
pub fn read_root(fabric: &dyn RemoteMemory, root: u32) -> Result<(u64, u32)> {
    let b = fabric.read(root, 0, ROOT_LEN)?.value;
    Ok((
        u64::from_le_bytes(b[..8].try_into().unwrap()),
        u32::from_le_bytes(b[8..12].try_into().unwrap()),
    ))
}

fn write_root(fabric: &dyn RemoteMemory, root: u32, epoch: u64, region: u32) -> Result<()> {
    let mut b = [0u8; ROOT_LEN as usize];
    b[..8].copy_from_slice(&epoch.to_le_bytes());
    b[8..12].copy_from_slice(&region.to_le_bytes());
    fabric.write(root, 0, &b).map(|_| ())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LshParams {
    /// Hash bits; the buffer has `2^h` buckets.
    pub h: u32,
    /// Hamming radius probed at query time.
    pub probe_radius: u32,
    pub seed: u64,
}

impl Default for LshParams {
    fn default() -> Self {
        Self {
            h: 6,
            probe_radius: 1,
            seed: 0x15b,
        }
    }
}

/// Random-hyperplane buckets of vectors inserted while a rebuild runs.
#[derive(Debug, Clone)]
pub struct LshBuffer {
    params: LshParams,
    dim: usize,
    metric: Metric,
    planes: Vec<f32>,
    /// Insertion order.
    entries: Vec<(u64, Vec<f32>)>,
    buckets: Vec<Vec<usize>>,
}

impl LshBuffer {
    pub fn new(dim: usize, metric: Metric, params: LshParams) -> Result<Self> {
        if params.h == 0 || params.h > 16 {
            return Err(Error::invalid("LSH bit count must be in 1..=16"));
        }
        if dim == 0 {
            return Err(Error::invalid("dimension must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let planes = (0..params.h as usize * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        Ok(Self {
            params,
            dim,
            metric,
            planes,
            entries: Vec::new(),
            buckets: vec![Vec::new(); 1 << params.h],
        })
    }

    pub fn params(&self) -> &LshParams {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(u64, Vec<f32>)] {
        &self.entries
    }

    /// Sign pattern of the `h` projections.
    pub fn hash(&self, v: &[f32]) -> usize {
        self.planes
            .chunks_exact(self.dim)
            .enumerate()
            .map(|(i, p)| {
                let dot: f32 = p.iter().zip(v).map(|(a, b)| a * b).sum();
                ((dot >= 0.0) as usize) << i
            })
            .sum()
    }

    pub fn insert(&mut self, label: u64, v: &[f32]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: v.len(),
            });
        }
        let b = self.hash(v);
        self.buckets[b].push(self.entries.len());
        self.entries.push((label, v.to_vec()));
        Ok(())
    }

    pub fn bucket_sizes(&self) -> Vec<usize> {
        self.buckets.iter().map(Vec::len).collect()
    }

    /// Buckets within `probe_radius` of `q`'s bucket.
    pub fn probe(&self, q: &[f32]) -> Vec<usize> {
        let home = self.hash(q);
        (0..self.buckets.len())
            .filter(|&b| (b ^ home).count_ones() <= self.params.probe_radius)
            .collect()
    }

    /// Exact top-`k` over the probed buckets; also returns the number of
    /// distances computed.
    pub fn search_counted(&self, q: &[f32], k: usize) -> (Vec<Neighbor>, u64) {
        let mut out: Vec<Neighbor> = self
            .probe(q)
            .into_iter()
            .flat_map(|b| &self.buckets[b])
            .map(|&i| {
                let (label, v) = &self.entries[i];
                Neighbor::new(*label, distance_unchecked(v, q, self.metric))
            })
            .collect();
        let dc = out.len() as u64;
        out.sort_unstable();
        out.truncate(k);
        (out, dc)
    }
}

/// Runs `batch` on `engine` (the old epoch) and merges in the buffer's
/// candidates. With no buffer this is a plain batch.
pub fn search_during_rebuild(engine: &mut QueryEngine, batch: &QueryBatch, buf: Option<&LshBuffer>) -> Result<BatchOutcome> {
    let mut out = engine.run_batch(batch)?;
    let Some(buf) = buf.filter(|b| !b.is_empty()) else {
        return Ok(out);
    };
    let mut dc = 0u64;
    for (qi, r) in out.results.iter_mut().enumerate() {
        let (extra, n) = buf.search_counted(batch.queries.get(qi), batch.k);
        dc += n;
        r.neighbors = merge_topk(&[std::mem::take(&mut r.neighbors), extra], batch.k);
    }
    let t = engine.params().costs.distance_cost(dc, batch.queries.dim());
    out.metrics.t_comp += t;
    out.metrics.t_pipeline += t;
    Ok(out)
}

/// Every vector and label stored in `region`, in sub order.
pub fn collect_vectors(fabric: &dyn RemoteMemory, region: u32) -> Result<(VectorStore, Vec<u64>)> {
    let (_, meta) = read_meta(fabric, region, None)?;
    let mut store: Option<VectorStore> = None;
    let mut labels = Vec::new();
    for sub in 0..meta.p() {
        let (idx, _) = fetch_sub(fabric, region, &meta, sub)?;
        let s = store.get_or_insert_with(|| VectorStore::new(idx.dim(), idx.metric()));
        for node in 0..idx.ntotal() as u32 {
            s.push(idx.vector(node))?;
        }
        labels.extend_from_slice(idx.labels());
    }
    Ok((store.ok_or_else(|| Error::invalid("region holds no sub-indexes"))?, labels))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RebuildParams {
    pub build: BuildParams,
    pub lsh: LshParams,
}

/// A shadow build in flight.
pub struct RebuildJob {
    handle: JoinHandle<Result<Deployment>>,
    /// Buffer entries included in the snapshot.
    snapshot_len: usize,
    pub vectors: usize,
}

impl RebuildJob {
    pub fn is_finished(&self) -> bool {
        self.handle.is_finished()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SwitchReport {
    pub old_region: u32,
    pub new_region: u32,
    pub epoch: u64,
    pub rebuilt_vectors: usize,
    /// Buffered after the snapshot and re-inserted into the new epoch.
    pub merged_late: usize,
    pub late_failures: usize,
}

/// Serializes phase transitions of one deployment.
pub struct EpochManager {
    fabric: Arc<dyn RemoteMemory>,
    root: RegionHandle,
    state: EpochState,
    old_region: Option<u32>,
    workers: BTreeSet<u32>,
    acked: BTreeSet<u32>,
    buffer: Option<LshBuffer>,
    params: RebuildParams,
    rebuilds: usize,
}

impl EpochManager {
    /// Registers the root region and commits `(epoch, region)` to it.
    pub fn new(fabric: Arc<dyn RemoteMemory>, region: u32, epoch: u64, workers: &[u32], params: RebuildParams) -> Result<Self> {
        let root = fabric.register_region(ROOT_LEN)?;
        write_root(fabric.as_ref(), root.id, epoch, region)?;
        Ok(Self {
            fabric,
            root,
            state: EpochState {
                epoch,
                region,
                phase: Phase::Steady,
            },
            old_region: None,
            workers: workers.iter().copied().collect(),
            acked: BTreeSet::new(),
            buffer: None,
            params,
            rebuilds: 0,
        })
    }

    pub fn state(&self) -> EpochState {
        self.state
    }

    pub fn root(&self) -> u32 {
        self.root.id
    }

    pub fn old_region(&self) -> Option<u32> {
        self.old_region
    }

    pub fn rebuilds(&self) -> usize {
        self.rebuilds
    }

    pub fn params(&self) -> &RebuildParams {
        &self.params
    }

    /// The insert buffer, present while not `Steady`.
    pub fn buffer(&self) -> Option<&LshBuffer> {
        self.buffer.as_ref()
    }

    pub fn has_acked(&self, worker: u32) -> bool {
        self.acked.contains(&worker)
    }

    /// The buffer a given worker must merge into its results: only workers
    /// still on the old epoch need it.
    pub fn buffer_for(&self, worker: u32) -> Option<&LshBuffer> {
        match self.state.phase {
            Phase::Steady => None,
            Phase::Rebuilding => self.buffer.as_ref(),
            Phase::Switching if self.acked.contains(&worker) => None,
            Phase::Switching => self.buffer.as_ref(),
        }
    }

    /// `Steady -> Rebuilding` with an empty buffer.
    pub fn begin_rebuild(&mut self, dim: usize, metric: Metric) -> Result<()> {
        if self.state.phase != Phase::Steady {
            return Err(Error::WrongPhase("a rebuild can only begin from Steady"));
        }
        self.buffer = Some(LshBuffer::new(dim, metric, self.params.lsh)?);
        self.state.phase = Phase::Rebuilding;
        Ok(())
    }

    pub fn buffer_insert(&mut self, label: u64, v: &[f32]) -> Result<()> {
        match (&mut self.buffer, self.state.phase) {
            (Some(b), Phase::Rebuilding | Phase::Switching) => b.insert(label, v),
            _ => Err(Error::WrongPhase("buffer inserts need Rebuilding or Switching")),
        }
    }

    /// Snapshots the committed vectors of the current region plus the buffer
    /// and builds the next epoch in the background.
    pub fn start_rebuild(&mut self) -> Result<RebuildJob> {
        if self.state.phase != Phase::Rebuilding {
            return Err(Error::WrongPhase("start_rebuild needs Rebuilding"));
        }
        let (mut store, mut labels) = collect_vectors(self.fabric.as_ref(), self.state.region)?;
        let buf = self.buffer.as_ref().expect("buffer exists while rebuilding");
        for (label, v) in buf.entries() {
            store.push(v)?;
            labels.push(*label);
        }
        let snapshot_len = buf.len();
        let fabric = Arc::clone(&self.fabric);
        let params = self.params.build.clone();
        let epoch = self.state.epoch + 1;
        let vectors = store.len();
        let handle = std::thread::spawn(move || build_deployment(fabric.as_ref(), &store, Some(&labels), &params, epoch));
        Ok(RebuildJob {
            handle,
            snapshot_len,
            vectors,
        })
    }

    /// Waits for `job`, commits the new epoch, moves `coordinator` to it and
    /// re-inserts what was buffered after the snapshot: `Rebuilding ->
    /// Switching`. On failure the old epoch stays authoritative.
    pub fn finish_rebuild(&mut self, job: RebuildJob, coordinator: &mut InsertCoordinator) -> Result<SwitchReport> {
        if self.state.phase != Phase::Rebuilding {
            return Err(Error::WrongPhase("finish_rebuild needs Rebuilding"));
        }
        let dep = job.handle.join().map_err(|_| Error::Inconsistent("shadow build panicked".into()))??;
        let old = self.state.region;
        let epoch = self.state.epoch + 1;
        if let Err(e) = write_root(self.fabric.as_ref(), self.root.id, epoch, dep.region.id) {
            let _ = self.fabric.free_region(dep.region.id);
            return Err(e);
        }
        self.state = EpochState {
            epoch,
            region: dep.region.id,
            phase: Phase::Switching,
        };
        self.old_region = Some(old);
        self.acked.clear();
        self.rebuilds += 1;
        coordinator.switch_region(dep.region.id)?;
        let late: Vec<(u64, Vec<f32>)> = self.buffer.as_ref().expect("buffer exists")
            .entries()[job.snapshot_len..]
            .to_vec();
        let mut late_failures = 0;
        if !late.is_empty() {
            let rows: Vec<&[f32]> = late.iter().map(|e| e.1.as_slice()).collect();
            let store = VectorStore::from_rows(&rows, dep.partition.centroids.metric())?;
            let labels: Vec<u64> = late.iter().map(|e| e.0).collect();
            let out = coordinator.insert_labeled(&store, &labels)?;
            late_failures = out.statuses.iter().filter(|s| s.label().is_none()).count();
        }
        if self.workers.is_empty() {
            self.complete()?;
        }
        Ok(SwitchReport {
            old_region: old,
            new_region: dep.region.id,
            epoch,
            rebuilt_vectors: job.vectors,
            merged_late: late.len(),
            late_failures,
        })
    }

    /// Synchronous rebuild: snapshot, build, switch.
    pub fn run_rebuild(&mut self, coordinator: &mut InsertCoordinator) -> Result<SwitchReport> {
        let job = self.start_rebuild()?;
        self.finish_rebuild(job, coordinator)
    }

    fn complete(&mut self) -> Result<()> {
        if let Some(old) = self.old_region.take() {
            self.fabric.free_region(old)?;
        }
        self.buffer = None;
        self.state.phase = Phase::Steady;
        Ok(())
    }

    /// Moves `engine` (worker `worker`) to the committed epoch. Idempotent;
    /// frees the old region once every worker has acknowledged.
    pub fn acknowledge_epoch(&mut self, worker: u32, engine: &mut QueryEngine) -> Result<()> {
        if !self.workers.contains(&worker) {
            return Err(Error::UnknownWorker(worker));
        }
        if engine.region() != self.state.region {
            let (_, region) = read_root(self.fabric.as_ref(), self.root.id)?;
            engine.switch_region(region)?;
        }
        if self.state.phase != Phase::Switching {
            return Ok(());
        }
        self.acked.insert(worker);
        if self.acked.len() == self.workers.len() {
            self.complete()?;
        }
        Ok(())
    }
}
