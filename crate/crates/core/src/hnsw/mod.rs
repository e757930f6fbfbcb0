//! Hierarchical navigable small world graphs.
//!
//! The graph is stored in the flat form used on the wire: a per-node `levels`
//! array, an `offsets` array into a flattened `neighbors` array, the raw
//! `vectors`, and a `labels` array mapping local node ids to global ids. Node
//! `i` owns `2M + level_i * M` neighbor slots starting at `offsets[i]`: `2M`
//! slots for layer 0 followed by `M` slots for each upper layer. Unused slots
//! hold [`EMPTY_SLOT`]. Because slot counts are fixed at insertion time, an
//! insert only appends to every array and rewrites a few slots in place.
//!
//! Levels are sampled as `floor(-ln(U) * level_lambda)` with `U` derived from
//! `(rng_seed, node id)`, so construction and replayed inserts are fully
//! deterministic.

mod image;

use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vector::{distance_unchecked, Metric, Neighbor, VectorStore};

pub use image::{ArrayKind, ImageHeader, ImageView, SubImage, HEADER_LEN};

pub const EMPTY_SLOT: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HnswParams {
    /// Degree bound on upper layers; layer 0 allows `2 * m`.
    pub m: usize,
    pub e_build: usize,
    pub e_search: usize,
    pub level_lambda: f64,
    pub rng_seed: u64,
    /// Use the diversity heuristic instead of plain closest-M selection.
    pub heuristic: bool,
    /// Clamp sampled levels to this value.
    pub level_cap: Option<u32>,
}

impl Default for HnswParams {
    fn default() -> Self {
        Self::with_m(16)
    }
}

impl HnswParams {
    pub fn with_m(m: usize) -> Self {
        Self {
            m,
            e_build: 100.max(m),
            e_search: 64,
            level_lambda: 1.0 / (m as f64).ln(),
            rng_seed: 0x5eed,
            heuristic: false,
            level_cap: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(Error::invalid("M must be at least 2"));
        }
        if self.e_build < self.m {
            return Err(Error::invalid("e_build must be at least M"));
        }
        if self.e_search < 1 {
            return Err(Error::invalid("e_search must be positive"));
        }
        if !(self.level_lambda > 0.0) || !self.level_lambda.is_finite() {
            return Err(Error::invalid("level_lambda must be positive"));
        }
        Ok(())
    }

    fn sample_level(&self, node: u64) -> u32 {
        let h = splitmix64(self.rng_seed ^ splitmix64(node.wrapping_add(0x9e37_79b9_7f4a_7c15)));
        // 53 random bits mapped into (0, 1].
        let u = ((h >> 11) as f64 + 1.0) / (1u64 << 53) as f64;
        let level = (-u.ln() * self.level_lambda).floor();
        let level = if level > 64.0 { 64 } else { level as u32 };
        match self.level_cap {
            Some(cap) => level.min(cap),
            None => level,
        }
    }
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Counters from one search or insert, used by the cost simulator.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SearchStats {
    pub distance_computations: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Cand {
    dist: f32,
    id: u32,
}

impl Eq for Cand {}

impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Cand {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.dist
            .total_cmp(&other.dist)
            .then_with(|| self.id.cmp(&other.id))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HnswIndex {
    params: HnswParams,
    metric: Metric,
    dim: usize,
    levels: Vec<u32>,
    offsets: Vec<u64>,
    neighbors: Vec<u32>,
    vectors: Vec<f32>,
    labels: Vec<u64>,
    entry_point: u32,
    max_level: u32,
}

impl HnswIndex {
    /// Builds over `store`, labelling node `i` with `i`.
    pub fn build(store: &VectorStore, params: HnswParams) -> Result<Self> {
        let labels: Vec<u64> = (0..store.len() as u64).collect();
        Self::build_with_labels(store, &labels, params)
    }

    pub fn build_with_labels(store: &VectorStore, labels: &[u64], params: HnswParams) -> Result<Self> {
        Self::build_counted(store, labels, params).map(|(idx, _)| idx)
    }

    pub fn build_counted(
        store: &VectorStore,
        labels: &[u64],
        params: HnswParams,
    ) -> Result<(Self, SearchStats)> {
        params.validate()?;
        if store.is_empty() {
            return Err(Error::invalid("cannot build an index over an empty store"));
        }
        if labels.len() != store.len() {
            return Err(Error::invalid("label count differs from vector count"));
        }
        let mut index = Self::empty(store.dim(), store.metric(), params);
        let mut stats = SearchStats::default();
        for (row, &label) in store.iter().zip(labels) {
            let (_, s) = index.insert_counted(row, label)?;
            stats.distance_computations += s.distance_computations;
        }
        Ok((index, stats))
    }

    fn empty(dim: usize, metric: Metric, params: HnswParams) -> Self {
        Self {
            params,
            metric,
            dim,
            levels: Vec::new(),
            offsets: vec![0],
            neighbors: Vec::new(),
            vectors: Vec::new(),
            labels: Vec::new(),
            entry_point: 0,
            max_level: 0,
        }
    }

    pub fn ntotal(&self) -> usize {
        self.levels.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn params(&self) -> &HnswParams {
        &self.params
    }

    pub fn entry_point(&self) -> u32 {
        self.entry_point
    }

    pub fn max_level(&self) -> u32 {
        self.max_level
    }

    pub fn levels(&self) -> &[u32] {
        &self.levels
    }

    pub fn offsets(&self) -> &[u64] {
        &self.offsets
    }

    pub fn neighbors(&self) -> &[u32] {
        &self.neighbors
    }

    pub fn vectors(&self) -> &[f32] {
        &self.vectors
    }

    pub fn labels(&self) -> &[u64] {
        &self.labels
    }

    pub fn vector(&self, node: u32) -> &[f32] {
        let i = node as usize;
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, node: u32) -> u64 {
        self.labels[node as usize]
    }

    /// The stored vectors, in node order.
    pub fn to_store(&self) -> VectorStore {
        VectorStore::from_flat(self.dim, self.vectors.clone(), self.metric)
            .expect("index vectors are a whole number of rows")
    }

    fn layer_capacity(&self, layer: u32) -> usize {
        if layer == 0 {
            2 * self.params.m
        } else {
            self.params.m
        }
    }

    fn slots_for_level(m: usize, level: u32) -> u64 {
        (2 * m + level as usize * m) as u64
    }

    fn slot_range(&self, node: u32, layer: u32) -> std::ops::Range<usize> {
        let base = self.offsets[node as usize] as usize;
        let m = self.params.m;
        let start = if layer == 0 {
            base
        } else {
            base + 2 * m + (layer as usize - 1) * m
        };
        start..start + self.layer_capacity(layer)
    }

    /// Neighbor ids of `node` on `layer`.
    pub fn neighbors_of(&self, node: u32, layer: u32) -> impl Iterator<Item = u32> + '_ {
        self.neighbors[self.slot_range(node, layer)]
            .iter()
            .copied()
            .take_while(|&n| n != EMPTY_SLOT)
    }

    #[inline]
    fn dist_to(&self, node: u32, q: &[f32], stats: &mut SearchStats) -> f32 {
        stats.distance_computations += 1;
        distance_unchecked(self.vector(node), q, self.metric)
    }

    fn greedy_step(&self, q: &[f32], mut cur: Cand, layer: u32, stats: &mut SearchStats) -> Cand {
        loop {
            let mut improved = false;
            for n in self.neighbors_of(cur.id, layer) {
                let c = Cand {
                    dist: self.dist_to(n, q, stats),
                    id: n,
                };
                if c < cur {
                    cur = c;
                    improved = true;
                }
            }
            if !improved {
                return cur;
            }
        }
    }

    /// Beam search on one layer. Returns up to `ef` candidates, ascending.
    fn search_layer(
        &self,
        q: &[f32],
        entries: &[Cand],
        ef: usize,
        layer: u32,
        visited: &mut Vec<bool>,
        stats: &mut SearchStats,
    ) -> Vec<Cand> {
        visited.clear();
        visited.resize(self.ntotal(), false);
        let mut frontier: BinaryHeap<std::cmp::Reverse<Cand>> = BinaryHeap::new();
        let mut best: BinaryHeap<Cand> = BinaryHeap::new();
        for &e in entries {
            if !visited[e.id as usize] {
                visited[e.id as usize] = true;
                frontier.push(std::cmp::Reverse(e));
                best.push(e);
            }
        }
        while best.len() > ef {
            best.pop();
        }
        while let Some(std::cmp::Reverse(c)) = frontier.pop() {
            if let Some(worst) = best.peek() {
                if best.len() >= ef && c > *worst {
                    break;
                }
            }
            for n in self.neighbors_of(c.id, layer) {
                if visited[n as usize] {
                    continue;
                }
                visited[n as usize] = true;
                let cand = Cand {
                    dist: self.dist_to(n, q, stats),
                    id: n,
                };
                if best.len() < ef || cand < *best.peek().unwrap() {
                    frontier.push(std::cmp::Reverse(cand));
                    best.push(cand);
                    if best.len() > ef {
                        best.pop();
                    }
                }
            }
        }
        best.into_sorted_vec()
    }

    pub fn search(&self, q: &[f32], k: usize, e_search: usize) -> Vec<Neighbor> {
        self.search_counted(q, k, e_search).0
    }

    /// Top-`k` search with candidate list `e_search`. A candidate list at
    /// least as large as the index is treated as a request for an exact scan.
    pub fn search_counted(&self, q: &[f32], k: usize, e_search: usize) -> (Vec<Neighbor>, SearchStats) {
        let mut stats = SearchStats::default();
        if self.ntotal() == 0 || k == 0 {
            return (Vec::new(), stats);
        }
        debug_assert_eq!(q.len(), self.dim);
        let mut out: Vec<Neighbor> = if e_search >= self.ntotal() {
            (0..self.ntotal() as u32)
                .map(|n| Neighbor::new(self.label(n), self.dist_to(n, q, &mut stats)))
                .collect()
        } else {
            let ep = self.entry_point;
            let mut cur = Cand {
                dist: self.dist_to(ep, q, &mut stats),
                id: ep,
            };
            for layer in (1..=self.max_level).rev() {
                cur = self.greedy_step(q, cur, layer, &mut stats);
            }
            let mut visited = Vec::new();
            self.search_layer(q, &[cur], e_search.max(k), 0, &mut visited, &mut stats)
                .into_iter()
                .map(|c| Neighbor::new(self.label(c.id), c.dist))
                .collect()
        };
        out.sort_unstable();
        out.truncate(k);
        (out, stats)
    }

    pub fn insert(&mut self, v: &[f32], label: u64) -> Result<u32> {
        self.insert_counted(v, label).map(|(id, _)| id)
    }

    pub fn insert_counted(&mut self, v: &[f32], label: u64) -> Result<(u32, SearchStats)> {
        if v.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: v.len(),
            });
        }
        let mut stats = SearchStats::default();
        let id = self.ntotal() as u32;
        let level = self.params.sample_level(id as u64);
        let slots = Self::slots_for_level(self.params.m, level);
        let start = *self.offsets.last().unwrap();
        self.levels.push(level);
        self.offsets.push(start + slots);
        self.neighbors.resize((start + slots) as usize, EMPTY_SLOT);
        self.vectors.extend_from_slice(v);
        self.labels.push(label);

        if id == 0 {
            self.entry_point = 0;
            self.max_level = level;
            return Ok((id, stats));
        }

        let mut cur = Cand {
            dist: self.dist_to(self.entry_point, v, &mut stats),
            id: self.entry_point,
        };
        let mut layer = self.max_level;
        while layer > level {
            cur = self.greedy_step(v, cur, layer, &mut stats);
            layer -= 1;
        }
        let mut entries = vec![cur];
        let mut visited = Vec::new();
        let top = level.min(self.max_level);
        for layer in (0..=top).rev() {
            let found = self.search_layer(v, &entries, self.params.e_build, layer, &mut visited, &mut stats);
            let found: Vec<Cand> = found.into_iter().filter(|c| c.id != id).collect();
            let chosen = self.select(&found, self.layer_capacity(layer), &mut stats);
            let range = self.slot_range(id, layer);
            for (slot, c) in range.clone().zip(&chosen) {
                self.neighbors[slot] = c.id;
            }
            let mut linked = false;
            for c in &chosen {
                linked |= self.add_link(c.id, id, c.dist, layer, &mut stats);
            }
            if !linked {
                if let Some(c) = chosen.first() {
                    self.force_link(c.id, id, layer, &mut stats);
                }
            }
            if !found.is_empty() {
                entries = found;
            }
        }
        if level > self.max_level {
            self.max_level = level;
            self.entry_point = id;
        }
        Ok((id, stats))
    }

    /// Picks at most `cap` neighbors from ascending `cands`.
    fn select(&self, cands: &[Cand], cap: usize, stats: &mut SearchStats) -> Vec<Cand> {
        if !self.params.heuristic || cands.len() <= cap {
            return cands.iter().take(cap).copied().collect();
        }
        let mut kept: Vec<Cand> = Vec::with_capacity(cap);
        for &c in cands {
            if kept.len() >= cap {
                break;
            }
            let diverse = kept.iter().all(|r| {
                stats.distance_computations += 1;
                distance_unchecked(self.vector(c.id), self.vector(r.id), self.metric) > c.dist
            });
            if diverse {
                kept.push(c);
            }
        }
        kept
    }

    /// Adds `to` to `from`'s list on `layer`, pruning if full. Returns whether
    /// `to` survived the pruning.
    fn add_link(&mut self, from: u32, to: u32, dist: f32, layer: u32, stats: &mut SearchStats) -> bool {
        let range = self.slot_range(from, layer);
        let slots = &mut self.neighbors[range.clone()];
        if let Some(free) = slots.iter().position(|&n| n == EMPTY_SLOT) {
            slots[free] = to;
            return true;
        }
        let mut cands: Vec<Cand> = self.neighbors[range.clone()]
            .iter()
            .map(|&n| Cand {
                dist: {
                    stats.distance_computations += 1;
                    distance_unchecked(self.vector(from), self.vector(n), self.metric)
                },
                id: n,
            })
            .collect();
        cands.push(Cand { dist, id: to });
        cands.sort_unstable();
        let chosen = self.select(&cands, range.len(), stats);
        for (i, slot) in range.enumerate() {
            self.neighbors[slot] = chosen.get(i).map_or(EMPTY_SLOT, |c| c.id);
        }
        chosen.iter().any(|c| c.id == to)
    }

    /// Gives a node that every neighbor pruned away one inbound edge, so it
    /// stays reachable: it replaces the farthest entry of `from`'s full list.
    fn force_link(&mut self, from: u32, to: u32, layer: u32, stats: &mut SearchStats) {
        let range = self.slot_range(from, layer);
        let far = range
            .clone()
            .max_by(|&a, &b| {
                let da = self.dist_between(from, self.neighbors[a], stats);
                let db = self.dist_between(from, self.neighbors[b], stats);
                da.total_cmp(&db).then(a.cmp(&b))
            })
            .expect("non-empty slot range");
        self.neighbors[far] = to;
    }

    fn dist_between(&self, a: u32, b: u32, stats: &mut SearchStats) -> f32 {
        stats.distance_computations += 1;
        distance_unchecked(self.vector(a), self.vector(b), self.metric)
    }

    /// Checks every structural invariant of the flat representation.
    pub fn validate(&self) -> Result<()> {
        let n = self.ntotal();
        let bad = |m: String| Err(Error::Malformed(m));
        if self.labels.len() != n || self.vectors.len() != n * self.dim || self.offsets.len() != n + 1 {
            return bad("array lengths disagree with ntotal".into());
        }
        if n == 0 {
            return Ok(());
        }
        if self.entry_point as usize >= n {
            return bad(format!("entry point {} out of range", self.entry_point));
        }
        if self.levels[self.entry_point as usize] != self.max_level {
            return bad("entry point is not on the top layer".into());
        }
        if self.levels.iter().any(|&l| l > self.max_level) {
            return bad("node level exceeds max_level".into());
        }
        if self.offsets[0] != 0 {
            return bad("offsets must start at 0".into());
        }
        for i in 0..n {
            let want = Self::slots_for_level(self.params.m, self.levels[i]);
            if self.offsets[i + 1] < self.offsets[i] || self.offsets[i + 1] - self.offsets[i] != want {
                return bad(format!("node {i} has a bad neighbor span"));
            }
        }
        if *self.offsets.last().unwrap() as usize != self.neighbors.len() {
            return bad("neighbors length disagrees with offsets".into());
        }
        for node in 0..n as u32 {
            for layer in 0..=self.levels[node as usize] {
                let slots = &self.neighbors[self.slot_range(node, layer)];
                let used = slots.iter().take_while(|&&s| s != EMPTY_SLOT).count();
                if slots[used..].iter().any(|&s| s != EMPTY_SLOT) {
                    return bad(format!("node {node} layer {layer} has holes"));
                }
                for &nb in &slots[..used] {
                    if nb as usize >= n {
                        return bad(format!("neighbor id {nb} out of range"));
                    }
                    // Hierarchy nesting: a layer-l neighbor must exist on layer l.
                    if self.levels[nb as usize] < layer {
                        return bad(format!("neighbor {nb} is not on layer {layer}"));
                    }
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn from_parts(
        params: HnswParams,
        metric: Metric,
        dim: usize,
        levels: Vec<u32>,
        offsets: Vec<u64>,
        neighbors: Vec<u32>,
        vectors: Vec<f32>,
        labels: Vec<u64>,
        entry_point: u32,
        max_level: u32,
    ) -> Result<Self> {
        let idx = Self {
            params,
            metric,
            dim,
            levels,
            offsets,
            neighbors,
            vectors,
            labels,
            entry_point,
            max_level,
        };
        idx.validate()?;
        Ok(idx)
    }
}
