//! One-sided inserts: route, update a local copy of the sub-index, diff it
//! against what remote memory holds, and write only the difference.
//!
//! An [`UpdateCommit`] consists of
//! - appends: the grown tails of all five arrays, placed by
//!   [`alloc_append`] into internal gaps and then the group overflow;
//! - overwrites: dirty byte ranges of the existing neighbor lists (ranges
//!   closer than [`COALESCE_GAP`] bytes are merged) and the changed bytes of
//!   the image header;
//! - the new metadata table, written to the inactive copy, then the
//!   generation flip.
//!
//! [`commit`] issues those operations in that order as doorbell batches of at
//! most `max_batch` operations, so the flip is always applied last. All data
//! writes target absolute addresses and are idempotent, which is what makes
//! the per-chunk retry and [`InsertCoordinator`]'s deferred replay safe.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fabric::{Op, RemoteMemory};
use crate::hnsw::{ArrayKind, HnswIndex};
use crate::layout::{alloc_append, fetch_sub, meta_commit_ops, plan_fetch, read_meta, read_meta_index, GlobalMeta, Placement, SubSync};
use crate::query::{CachedSub, MetaIndex, StageCosts, SubCache};
use crate::vector::VectorStore;

/// Dirty neighbor ranges separated by fewer bytes than this are written as one.
pub const COALESCE_GAP: u64 = 64;

/// The remote writes that bring one sub from its pre-state to a new local state.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateCommit {
    pub sub_id: usize,
    /// `(remote offset, bytes)` for header fields and dirty neighbor ranges.
    pub overwrites: Vec<(u64, Vec<u8>)>,
    /// `(remote offset, bytes)` for array growth, overflow framing included.
    pub appends: Vec<(u64, Vec<u8>)>,
    pub new_meta: GlobalMeta,
    pub new_sync: SubSync,
}

impl UpdateCommit {
    pub fn is_empty(&self) -> bool {
        self.overwrites.is_empty() && self.appends.is_empty()
    }

    /// Data operations in commit order: appends, then overwrites.
    pub fn data_ops(&self, region: u32) -> Vec<Op> {
        self.appends
            .iter()
            .chain(&self.overwrites)
            .map(|(offset, data)| Op::Write {
                region,
                offset: *offset,
                data: data.clone(),
            })
            .collect()
    }

    pub fn bytes(&self) -> u64 {
        self.appends.iter().chain(&self.overwrites).map(|w| w.1.len() as u64).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Prepared {
    Ready(Box<UpdateCommit>),
    RebuildRequired,
}

/// Half-open element ranges where `a` and `b` differ, merged when closer
/// than `gap` elements.
fn dirty_ranges(a: &[u32], b: &[u32], gap: usize) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    let mut i = 0;
    while i < a.len() {
        if a[i] == b[i] {
            i += 1;
            continue;
        }
        let start = i;
        while i < a.len() && a[i] != b[i] {
            i += 1;
        }
        match out.last_mut() {
            Some(last) if start - last.1 < gap => last.1 = i,
            _ => out.push((start, i)),
        }
    }
    out
}

fn byte_diff(a: &[u8], b: &[u8], gap: usize) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    for i in (0..a.len()).filter(|&i| a[i] != b[i]) {
        match out.last_mut() {
            Some(last) if i - last.1 < gap => last.1 = i + 1,
            _ => out.push((i, i + 1)),
        }
    }
    out
}

/// Builds the commit moving `sub` from `pre` (what the remote holds, described
/// by `pre_sync`) to `post`. `post` must extend `pre`: same parameters, arrays
/// only grown, only neighbor slots changed in place.
pub fn prepare_commit(sub: usize, pre: &HnswIndex, pre_sync: &SubSync, post: &HnswIndex, meta: &GlobalMeta) -> Result<Prepared> {
    let entry = *meta.sub(sub)?;
    let pre_lens = pre.array_lens();
    let post_lens = post.array_lens();
    if pre_lens != [0, 1, 2, 3, 4].map(|k| pre_sync.header.arrays[k].len) {
        return Err(Error::Inconsistent("pre-state does not match its sync record".into()));
    }
    if post.dim() != pre.dim() || post.metric() != pre.metric() || post.params() != pre.params() {
        return Err(Error::invalid("post-state must keep the pre-state's parameters"));
    }
    if post_lens.iter().zip(&pre_lens).any(|(p, q)| p < q) || post.ntotal() < pre.ntotal() {
        return Err(Error::invalid("post-state must only grow"));
    }
    let mut new_meta = meta.clone();
    let mut new_sync = pre_sync.clone();
    let mut appends = Vec::new();
    for kind in ArrayKind::ALL {
        let (from, to) = (pre_lens[kind as usize], post_lens[kind as usize]);
        if to == from {
            continue;
        }
        let es = kind.elem_size() as u64;
        let bytes = post.array_byte_range(kind, (from / es) as usize, (to / es) as usize);
        match alloc_append(&mut new_meta, &mut new_sync, sub, kind, to - from)? {
            Placement::RebuildRequired => return Ok(Prepared::RebuildRequired),
            Placement::Placed { gap, overflow } => {
                let gap_len = gap.map_or(0, |g| g.1 as usize);
                if let Some((remote, len)) = gap {
                    appends.push((remote, bytes[..len as usize].to_vec()));
                }
                if let Some(rec) = overflow {
                    let payload = &bytes[gap_len..];
                    // Frame and payload are adjacent: one write either way round.
                    let mut data = Vec::with_capacity(payload.len() + rec.frame.len());
                    if rec.frame_offset < rec.payload_offset {
                        data.extend_from_slice(&rec.frame);
                        data.extend_from_slice(payload);
                    } else {
                        data.extend_from_slice(payload);
                        data.extend_from_slice(&rec.frame);
                    }
                    appends.push((rec.frame_offset.min(rec.payload_offset), data));
                }
            }
        }
    }

    let mut overwrites = Vec::new();
    let nb_pre = pre.neighbors();
    let nb_post = &post.neighbors()[..nb_pre.len()];
    for (a, b) in dirty_ranges(nb_pre, nb_post, (COALESCE_GAP / 4) as usize) {
        let bytes = post.array_byte_range(ArrayKind::Neighbors, a, b);
        for (remote, off, len) in pre_sync.map_range(ArrayKind::Neighbors, 4 * a as u64, 4 * (b - a) as u64)? {
            overwrites.push((remote, bytes[off as usize..(off + len) as usize].to_vec()));
        }
    }

    let h = &mut new_sync.header;
    h.ntotal = post.ntotal() as u64;
    h.entry_point = post.entry_point();
    h.max_level = post.max_level();
    let old = pre_sync.header.encode();
    let new = h.encode();
    for (a, b) in byte_diff(&old, &new, COALESCE_GAP as usize) {
        overwrites.push((entry.base_offset + a as u64, new[a..b].to_vec()));
    }

    if !(appends.is_empty() && overwrites.is_empty()) {
        new_meta.subs[sub].version += 1;
    }
    Ok(Prepared::Ready(Box::new(UpdateCommit {
        sub_id: sub,
        overwrites,
        appends,
        new_meta,
        new_sync,
    })))
}

/// Outcome of a commit, in fabric terms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct CommitReport {
    pub ops: usize,
    pub round_trips: usize,
    pub bytes: u64,
    pub cost: f64,
    pub retries: usize,
}

/// Issues `ops` in order as doorbells of at most `max_batch` operations; each
/// chunk is retried once.
pub fn issue_chunked(fabric: &dyn RemoteMemory, ops: Vec<Op>) -> Result<CommitReport> {
    let max = fabric.cost_model().max_batch.max(1);
    let mut report = CommitReport {
        ops: ops.len(),
        bytes: ops.iter().map(Op::len).sum(),
        ..Default::default()
    };
    let mut rest = ops;
    while !rest.is_empty() {
        let tail = rest.split_off(rest.len().min(max));
        let chunk = std::mem::replace(&mut rest, tail);
        let t = match fabric.doorbell(chunk.clone()) {
            Ok(t) => t,
            Err(_) => {
                report.retries += 1;
                report.round_trips += 1;
                fabric.doorbell(chunk)?
            }
        };
        report.round_trips += 1;
        report.cost += t.cost;
    }
    Ok(report)
}

/// Writes `update` and publishes its metadata as generation `gen + 1`.
/// An empty update does nothing.
pub fn commit(update: &UpdateCommit, fabric: &dyn RemoteMemory, region: u32, gen: u64) -> Result<CommitReport> {
    if update.is_empty() {
        return Ok(CommitReport::default());
    }
    let mut ops = update.data_ops(region);
    ops.extend(meta_commit_ops(region, gen, &update.new_meta));
    issue_chunked(fabric, ops)
}

/// Number of doorbells `n_ops` operations need.
pub fn chunk_count(n_ops: usize, max_batch: usize) -> usize {
    n_ops.div_ceil(max_batch.max(1))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum InsertStatus {
    Committed { label: u64, sub: usize },
    /// No room left in the sub's gaps or group overflow; the vector was not
    /// inserted and a rebuild has been requested.
    RebuildRequired,
    /// Applied locally; the remote write failed and will be replayed before
    /// the next commit.
    Pending { label: u64, sub: usize },
    Failed(String),
}

impl InsertStatus {
    pub fn label(&self) -> Option<u64> {
        match self {
            Self::Committed { label, .. } | Self::Pending { label, .. } => Some(*label),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
#[serde(default)]
pub struct InsertParams {
    /// Resident sub-index limit on the insert coordinator.
    pub cache_capacity: usize,
    pub e_meta: usize,
    pub costs: StageCosts,
}

impl Default for InsertParams {
    fn default() -> Self {
        Self {
            cache_capacity: 2,
            e_meta: 32,
            costs: StageCosts::default(),
        }
    }
}

/// Per-batch accounting of an insert batch, in simulated seconds.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct InsertMetrics {
    pub vectors: usize,
    pub committed: usize,
    pub rebuild_required: usize,
    pub subs_touched: usize,
    pub fetched: usize,
    pub commits: usize,
    pub round_trips: usize,
    pub bytes_written: u64,
    pub t_route: f64,
    pub t_fetch: f64,
    pub t_update: f64,
    pub t_commit: f64,
}

impl InsertMetrics {
    pub fn latency(&self) -> f64 {
        self.t_route + self.t_fetch + self.t_update + self.t_commit
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InsertOutcome {
    pub statuses: Vec<InsertStatus>,
    pub metrics: InsertMetrics,
}

/// The single writer of a deployment.
pub struct InsertCoordinator {
    fabric: Arc<dyn RemoteMemory>,
    region: u32,
    generation: u64,
    meta: GlobalMeta,
    meta_index: MetaIndex,
    cache: SubCache,
    params: InsertParams,
    /// Data operations whose commit failed, replayed before anything else.
    pending: Vec<Vec<Op>>,
}

impl InsertCoordinator {
    pub fn connect(fabric: Arc<dyn RemoteMemory>, region: u32, params: InsertParams) -> Result<Self> {
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
            pending: Vec::new(),
        })
    }

    pub fn region(&self) -> u32 {
        self.region
    }

    pub fn generation(&self) -> u64 {
        self.generation
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

    pub fn params(&self) -> &InsertParams {
        &self.params
    }

    pub fn has_pending(&self) -> bool {
        !self.pending.is_empty()
    }

    /// True once any placement failed or some overflow region is full.
    pub fn rebuild_requested(&self) -> bool {
        self.meta.rebuild_requested || self.meta.any_overflow_full()
    }

    /// The writer's local copy of `sub`, if resident.
    pub fn local_copy(&self, sub: usize) -> Option<&HnswIndex> {
        self.cache.peek(sub).map(|c| &c.index)
    }

    /// Rebinds to a new epoch's region.
    pub fn switch_region(&mut self, region: u32) -> Result<()> {
        let (generation, meta) = read_meta(self.fabric.as_ref(), region, None)?;
        let meta_index = MetaIndex::from_index(read_meta_index(self.fabric.as_ref(), region, &meta)?, self.params.e_meta)?;
        self.region = region;
        self.generation = generation;
        self.meta = meta;
        self.meta_index = meta_index;
        self.cache.clear();
        self.pending.clear();
        Ok(())
    }

    /// Partition each vector would be inserted into.
    pub fn route(&self, v: &[f32]) -> usize {
        self.meta_index.route(v, 1)[0]
    }

    /// Replays failed commits with the current metadata.
    pub fn flush(&mut self) -> Result<CommitReport> {
        if self.pending.is_empty() {
            return Ok(CommitReport::default());
        }
        let mut ops: Vec<Op> = self.pending.iter().flatten().cloned().collect();
        ops.extend(meta_commit_ops(self.region, self.generation, &self.meta));
        let r = issue_chunked(self.fabric.as_ref(), ops)?;
        self.pending.clear();
        self.generation += 1;
        Ok(r)
    }

    fn publish_meta(&mut self) -> Result<CommitReport> {
        let r = issue_chunked(self.fabric.as_ref(), meta_commit_ops(self.region, self.generation, &self.meta).to_vec())?;
        self.generation += 1;
        Ok(r)
    }

    fn load(&mut self, sub: usize, m: &mut InsertMetrics) -> Result<Arc<CachedSub>> {
        if let Some(c) = self.cache.get(sub) {
            return Ok(c);
        }
        let plan = plan_fetch(&self.meta, self.region, sub)?;
        let (index, sync) = fetch_sub(self.fabric.as_ref(), self.region, &self.meta, sub)?;
        m.fetched += 1;
        m.round_trips += 1;
        m.t_fetch += self.fabric.cost_model().doorbell_cost(plan.bytes(), plan.ranges.len())
            + self.params.costs.deser_per_byte * plan.bytes() as f64;
        let c = Arc::new(CachedSub {
            index,
            sync,
            version: self.meta.subs[sub].version,
        });
        self.cache.insert(sub, Arc::clone(&c));
        Ok(c)
    }

    /// Inserts `base` plus `vectors[ids]` into a copy of `base` and tries to
    /// commit. Returns the per-vector labels on success.
    fn try_commit(
        &mut self,
        sub: usize,
        base: &CachedSub,
        vectors: &VectorStore,
        ids: &[usize],
        fixed: Option<&[u64]>,
        m: &mut InsertMetrics,
    ) -> Result<Option<(Arc<CachedSub>, Vec<u64>, bool)>> {
        let mut post = base.index.clone();
        let mut labels = Vec::with_capacity(ids.len());
        let mut next = self.meta.next_label;
        let mut dc = 0u64;
        for &i in ids {
            let label = match fixed {
                Some(l) => l[i],
                None => next,
            };
            let (_, st) = post.insert_counted(vectors.get(i), label)?;
            dc += st.distance_computations;
            labels.push(label);
            next = next.max(label + 1);
        }
        m.t_update += self.params.costs.distance_cost(dc, vectors.dim());
        let mut meta = self.meta.clone();
        meta.next_label = next;
        let update = match prepare_commit(sub, &base.index, &base.sync, &post, &meta)? {
            Prepared::RebuildRequired => return Ok(None),
            Prepared::Ready(u) => u,
        };
        let entry = Arc::new(CachedSub {
            index: post,
            sync: update.new_sync.clone(),
            version: update.new_meta.subs[sub].version,
        });
        self.meta = update.new_meta.clone();
        self.cache.insert(sub, Arc::clone(&entry));
        if update.is_empty() {
            return Ok(Some((entry, labels, true)));
        }
        // The new table also covers any earlier unpublished commit, so its
        // data rides along.
        self.pending.push(update.data_ops(self.region));
        m.commits += 1;
        match self.flush() {
            Ok(r) => {
                m.round_trips += r.round_trips;
                m.bytes_written += r.bytes;
                m.t_commit += r.cost;
                Ok(Some((entry, labels, true)))
            }
            Err(_) => Ok(Some((entry, labels, false))),
        }
    }

    /// Routes every vector to its nearest partition, updates each touched
    /// sub locally and commits it. Vectors that no longer fit come back as
    /// [`InsertStatus::RebuildRequired`]; an empty batch touches nothing.
    pub fn insert_batch(&mut self, vectors: &VectorStore) -> Result<InsertOutcome> {
        self.insert_inner(vectors, None)
    }

    /// Like [`Self::insert_batch`] with caller-chosen labels, e.g. ones
    /// handed out by [`Self::reserve_labels`] while a rebuild was running.
    pub fn insert_labeled(&mut self, vectors: &VectorStore, labels: &[u64]) -> Result<InsertOutcome> {
        if labels.len() != vectors.len() {
            return Err(Error::invalid("one label per vector required"));
        }
        self.insert_inner(vectors, Some(labels))
    }

    /// Hands out `n` fresh labels without inserting anything. They are
    /// published with the next commit.
    pub fn reserve_labels(&mut self, n: u64) -> std::ops::Range<u64> {
        let start = self.meta.next_label;
        self.meta.next_label += n;
        start..start + n
    }

    fn insert_inner(&mut self, vectors: &VectorStore, fixed: Option<&[u64]>) -> Result<InsertOutcome> {
        let mut m = InsertMetrics {
            vectors: vectors.len(),
            ..Default::default()
        };
        if vectors.is_empty() {
            return Ok(InsertOutcome {
                statuses: Vec::new(),
                metrics: m,
            });
        }
        if vectors.dim() != self.meta_index.index.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.meta_index.index.dim(),
                got: vectors.dim(),
            });
        }
        let mut statuses = vec![InsertStatus::Failed("not attempted".into()); vectors.len()];
        if let Err(e) = self.flush().map(|r| {
            m.round_trips += r.round_trips;
            m.t_commit += r.cost;
        }) {
            statuses.fill(InsertStatus::Failed(format!("replaying an earlier commit failed: {e}")));
            return Ok(InsertOutcome { statuses, metrics: m });
        }

        let mut by_sub: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        let mut dc = 0u64;
        for i in 0..vectors.len() {
            let (r, st) = self.meta_index.route_counted(vectors.get(i), 1);
            dc += st.distance_computations;
            by_sub.entry(r[0]).or_default().push(i);
        }
        m.t_route = self.params.costs.distance_cost(dc, vectors.dim());
        m.subs_touched = by_sub.len();

        let mut exhausted = false;
        for (sub, ids) in by_sub {
            let base = match self.load(sub, &mut m) {
                Ok(b) => b,
                Err(e) => {
                    for &i in &ids {
                        statuses[i] = InsertStatus::Failed(e.to_string());
                    }
                    continue;
                }
            };
            let set = |ids: &[usize], labels: &[u64], durable: bool, statuses: &mut [InsertStatus]| {
                for (&i, &label) in ids.iter().zip(labels) {
                    statuses[i] = if durable {
                        InsertStatus::Committed { label, sub }
                    } else {
                        InsertStatus::Pending { label, sub }
                    };
                }
            };
            if let Some((_, labels, durable)) = self.try_commit(sub, &base, vectors, &ids, fixed, &mut m)? {
                set(&ids, &labels, durable, &mut statuses);
                continue;
            }
            // The batch as a whole does not fit: commit one vector at a time
            // up to the one that exhausts the space.
            let mut cur = base;
            for (n, &i) in ids.iter().enumerate() {
                match self.try_commit(sub, &cur, vectors, &[i], fixed, &mut m)? {
                    Some((entry, labels, durable)) => {
                        set(&[i], &labels, durable, &mut statuses);
                        cur = entry;
                    }
                    None => {
                        for &j in &ids[n..] {
                            statuses[j] = InsertStatus::RebuildRequired;
                        }
                        exhausted = true;
                        break;
                    }
                }
            }
        }
        if exhausted && !self.meta.rebuild_requested {
            self.meta.rebuild_requested = true;
            match self.publish_meta() {
                Ok(r) => {
                    m.round_trips += r.round_trips;
                    m.t_commit += r.cost;
                }
                Err(_) => self.pending.push(Vec::new()),
            }
        }
        m.committed = statuses.iter().filter(|s| matches!(s, InsertStatus::Committed { .. })).count();
        m.rebuild_required = statuses.iter().filter(|s| matches!(s, InsertStatus::RebuildRequired)).count();
        Ok(InsertOutcome { statuses, metrics: m })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::build::{build_deployment, BuildParams};
    use crate::data::{Mixture, MixtureSpec};
    use crate::fabric::{CostModel, Fabric};
    use crate::hnsw::{HnswParams, SubImage};
    use crate::layout::{build_layout, fresh_sync, plan_fetch, splice, GapPolicy};
    use crate::partition::PartitionParams;
    use crate::query::{EngineParams, QueryBatch, QueryEngine};
    use crate::vector::Metric;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_store(n: usize, dim: usize, seed: u64) -> VectorStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VectorStore::from_flat(dim, (0..n * dim).map(|_| rng.random()).collect(), Metric::Euclidean).unwrap()
    }

    struct Setup {
        fabric: Fabric,
        region: u32,
        meta: GlobalMeta,
        subs: Vec<HnswIndex>,
        syncs: Vec<SubSync>,
    }

    fn setup(policy: GapPolicy) -> Setup {
        let fabric = Fabric::new(CostModel::default());
        let subs: Vec<HnswIndex> = (0..3)
            .map(|i| HnswIndex::build(&rand_store(40, 6, i), HnswParams { rng_seed: i, ..HnswParams::with_m(4) }).unwrap())
            .collect();
        let images: Vec<SubImage> = subs.iter().map(|s| s.serialize(&policy)).collect();
        let mi = subs[0].serialize(&GapPolicy::none());
        let (region, meta) = build_layout(&fabric, &images, &mi, &policy, 0, 0).unwrap();
        let syncs = images.iter().zip(&meta.subs).map(|(i, e)| fresh_sync(i, e).unwrap()).collect();
        Setup {
            fabric,
            region: region.id,
            meta,
            subs,
            syncs,
        }
    }

    fn remote(s: &Setup, sub: usize) -> HnswIndex {
        let plan = plan_fetch(&s.meta, s.region, sub).unwrap();
        assert!(plan.ranges.len() <= 2);
        let bufs = s.fabric.doorbell(plan.ops()).unwrap().value;
        splice(&bufs[0], bufs.get(1).map_or(&[][..], |b| b), &s.meta, sub).unwrap().decode().unwrap()
    }

    fn step(s: &mut Setup, sub: usize, vectors: &[Vec<f32>]) -> Prepared {
        let mut post = s.subs[sub].clone();
        for v in vectors {
            post.insert(v, post.ntotal() as u64 + 1000).unwrap();
        }
        let prepared = prepare_commit(sub, &s.subs[sub], &s.syncs[sub], &post, &s.meta).unwrap();
        if let Prepared::Ready(u) = &prepared {
            let (gen, _) = read_meta(&s.fabric, s.region, None).unwrap();
            let before = s.fabric.stats();
            commit(u, &s.fabric, s.region, gen).unwrap();
            let n_ops = u.appends.len() + u.overwrites.len() + 2;
            assert_eq!(
                s.fabric.stats().delta(&before).doorbell_batches as usize,
                if u.is_empty() { 0 } else { chunk_count(n_ops, 16) }
            );
            s.meta = u.new_meta.clone();
            s.syncs[sub] = u.new_sync.clone();
            s.subs[sub] = post;
        }
        prepared
    }

    #[test]
    fn zero_inserts_make_an_empty_commit() {
        let mut s = setup(GapPolicy::default());
        let Prepared::Ready(u) = step(&mut s, 0, &[]) else { panic!() };
        assert!(u.is_empty());
        assert_eq!(u.new_meta, s.meta);
    }

    #[test]
    fn small_insert_stays_inside_the_base_range() {
        let mut s = setup(GapPolicy::default());
        let Prepared::Ready(u) = step(&mut s, 1, &[vec![0.5; 6]]) else { panic!() };
        let e = s.meta.subs[1];
        for (off, data) in u.appends.iter().chain(&u.overwrites) {
            assert!(*off >= e.base_offset && off + data.len() as u64 <= e.base_offset + e.base_len);
        }
        assert_eq!(plan_fetch(&s.meta, s.region, 1).unwrap().ranges.len(), 1);
        assert_eq!(remote(&s, 1), s.subs[1]);
    }

    #[test]
    fn spills_round_trip_in_both_directions_until_exhaustion() {
        let policy = GapPolicy {
            internal_gap_fraction: 0.02,
            overflow_fraction: 0.6,
        };
        let mut s = setup(policy);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut exhausted = [false; 3];
        for round in 0..200 {
            let sub = round % 3;
            if exhausted[sub] {
                continue;
            }
            let vs: Vec<Vec<f32>> = (0..rng.random_range(1..4)).map(|_| (0..6).map(|_| rng.random()).collect()).collect();
            match step(&mut s, sub, &vs) {
                Prepared::Ready(_) => {
                    s.meta.validate().unwrap();
                    for t in 0..3 {
                        assert_eq!(remote(&s, t), s.subs[t], "sub {t} after round {round}");
                    }
                }
                Prepared::RebuildRequired => exhausted[sub] = true,
            }
        }
        assert!(s.meta.groups[0].used_forward > 0 && s.meta.groups[0].used_backward > 0);
        assert!(exhausted[0] && exhausted[1]);
    }

    #[test]
    fn dirty_ranges_coalesce() {
        let a = [0u32; 40];
        let mut b = a;
        b[1] = 1;
        b[3] = 1;
        b[30] = 1;
        assert_eq!(dirty_ranges(&a, &b, 16), vec![(1, 4), (30, 31)]);
        assert_eq!(dirty_ranges(&a, &b, 1), vec![(1, 2), (3, 4), (30, 31)]);
    }

    fn deployment(overflow: f64) -> (Arc<Fabric>, u32, Mixture) {
        let mix = Mixture::new(MixtureSpec {
            dim: 8,
            components: 8,
            spread: 0.1,
            seed: 3,
        })
        .unwrap();
        let base = mix.sample(400, 1, Metric::Euclidean);
        let fabric = Arc::new(Fabric::new(CostModel::default()));
        let params = BuildParams {
            partition: PartitionParams { p: 4, ..Default::default() },
            gaps: GapPolicy {
                internal_gap_fraction: 0.05,
                overflow_fraction: overflow,
            },
            ..Default::default()
        };
        let d = build_deployment(fabric.as_ref(), &base, None, &params, 0).unwrap();
        (fabric, d.region.id, mix)
    }

    #[test]
    fn committed_inserts_are_found_by_a_cold_engine() {
        let (fabric, region, mix) = deployment(0.5);
        let mut co = InsertCoordinator::connect(fabric.clone(), region, InsertParams::default()).unwrap();
        let before = fabric.stats();
        assert!(co.insert_batch(&VectorStore::new(8, Metric::Euclidean)).unwrap().statuses.is_empty());
        assert_eq!(fabric.stats(), before);

        let fresh = mix.sample(100, 77, Metric::Euclidean);
        let out = co.insert_batch(&fresh).unwrap();
        let labels: Vec<u64> = out.statuses.iter().map(|s| s.label().expect("committed")).collect();
        let mut sorted = labels.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (400..500).collect::<Vec<_>>());

        let mut eng = QueryEngine::connect(
            fabric,
            region,
            EngineParams {
                cache_capacity: 4,
                ..Default::default()
            },
        )
        .unwrap();
        let res = eng.run_batch(&QueryBatch::new(fresh, 1, 1)).unwrap();
        let hits = res
            .results
            .iter()
            .zip(&labels)
            .filter(|(r, &l)| r.neighbors.first().is_some_and(|n| n.id == l && n.distance == 0.0))
            .count();
        assert!(hits >= 99, "{hits}");
    }

    #[test]
    fn exhaustion_requests_a_rebuild_at_the_exact_insert() {
        let (fabric, region, mix) = deployment(0.05);
        let mut co = InsertCoordinator::connect(fabric.clone(), region, InsertParams::default()).unwrap();
        let mut first_failure = None;
        for i in 0..400 {
            let v = mix.sample(1, 1000 + i, Metric::Euclidean);
            let out = co.insert_batch(&v).unwrap();
            match out.statuses[0] {
                InsertStatus::Committed { .. } => {}
                InsertStatus::RebuildRequired => {
                    first_failure.get_or_insert(i);
                    break;
                }
                ref s => panic!("{s:?}"),
            }
            assert!(!co.meta().rebuild_requested);
        }
        assert!(first_failure.is_some());
        assert!(co.rebuild_requested());
        let (_, remote_meta) = read_meta(fabric.as_ref(), region, None).unwrap();
        assert!(remote_meta.rebuild_requested);
    }

    #[test]
    fn failed_commits_are_replayed() {
        let (fabric, region, mix) = deployment(0.5);
        let mut co = InsertCoordinator::connect(fabric.clone(), region, InsertParams::default()).unwrap();
        // Warm the cache so the failure hits the commit, not the fetch.
        co.insert_batch(&mix.sample(1, 1, Metric::Euclidean)).unwrap();
        let v = mix.sample(1, 1, Metric::Euclidean);
        fabric.inject_faults(region, 2);
        let out = co.insert_batch(&v).unwrap();
        assert!(matches!(out.statuses[0], InsertStatus::Pending { .. }), "{:?}", out.statuses);
        assert!(co.has_pending());
        co.flush().unwrap();
        let sub = co.route(v.get(0));
        let (gen, meta) = read_meta(fabric.as_ref(), region, None).unwrap();
        assert_eq!(gen, co.generation());
        let (idx, _) = fetch_sub(fabric.as_ref(), region, &meta, sub).unwrap();
        assert_eq!(Some(&idx), co.local_copy(sub));
    }
}
