use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use crate::hnsw::HnswIndex;
use crate::layout::SubSync;

/// A deserialized sub-index together with what the writer needs to commit
/// against it.
#[derive(Debug, Clone, PartialEq)]
pub struct CachedSub {
    pub index: HnswIndex,
    pub sync: SubSync,
    /// Commit version of the remote copy this was decoded from.
    pub version: u64,
}

#[cfg(test)]
impl CachedSub {
    pub(crate) fn for_tests(seed: usize) -> Self {
        use crate::layout::GapPolicy;
        let store = crate::vector::VectorStore::from_rows(&[[seed as f32]], crate::vector::Metric::Euclidean).unwrap();
        let index = HnswIndex::build(&store, crate::hnsw::HnswParams::with_m(2)).unwrap();
        let img = index.serialize(&GapPolicy::none());
        let sync = crate::layout::fresh_sync(&img, &Default::default()).unwrap();
        Self { index, sync, version: 0 }
    }
}

/// LRU set of at most `capacity` sub-indexes.
#[derive(Debug, Clone, Default)]
pub struct SubCache {
    capacity: usize,
    clock: u64,
    entries: HashMap<usize, (Arc<CachedSub>, u64)>,
    order: BTreeMap<u64, usize>,
}

impl SubCache {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            ..Default::default()
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, sub: usize) -> bool {
        self.entries.contains_key(&sub)
    }

    fn bump(&mut self, sub: usize) -> Option<&Arc<CachedSub>> {
        self.clock += 1;
        let clock = self.clock;
        let (_, stamp) = self.entries.get_mut(&sub)?;
        self.order.remove(stamp);
        *stamp = clock;
        self.order.insert(clock, sub);
        self.entries.get(&sub).map(|e| &e.0)
    }

    /// Marks `sub` most recently used; returns whether it is resident.
    pub fn touch(&mut self, sub: usize) -> bool {
        self.bump(sub).is_some()
    }

    pub fn get(&mut self, sub: usize) -> Option<Arc<CachedSub>> {
        self.bump(sub).cloned()
    }

    /// Looks up without changing recency.
    pub fn peek(&self, sub: usize) -> Option<&Arc<CachedSub>> {
        self.entries.get(&sub).map(|e| &e.0)
    }

    /// Inserts or replaces `sub` as most recent, evicting the least recent
    /// entries beyond capacity. Returns the evicted ids.
    pub fn insert(&mut self, sub: usize, value: Arc<CachedSub>) -> Vec<usize> {
        if self.capacity == 0 {
            return vec![sub];
        }
        self.remove(sub);
        self.clock += 1;
        self.entries.insert(sub, (value, self.clock));
        self.order.insert(self.clock, sub);
        let mut evicted = Vec::new();
        while self.entries.len() > self.capacity {
            let (&stamp, &victim) = self.order.iter().next().expect("non-empty");
            self.order.remove(&stamp);
            self.entries.remove(&victim);
            evicted.push(victim);
        }
        evicted
    }

    pub fn remove(&mut self, sub: usize) -> Option<Arc<CachedSub>> {
        let (v, stamp) = self.entries.remove(&sub)?;
        self.order.remove(&stamp);
        Some(v)
    }

    pub fn clear(&mut self) {
        self.entries.clear();
        self.order.clear();
    }

    /// Resident ids from least to most recently used.
    pub fn lru_order(&self) -> Vec<usize> {
        self.order.values().copied().collect()
    }

    /// Drops entries whose version no longer matches `current(sub)`.
    pub fn retain_current(&mut self, current: impl Fn(usize) -> Option<u64>) -> Vec<usize> {
        let stale: Vec<usize> = self
            .entries
            .iter()
            .filter(|(&s, (v, _))| current(s) != Some(v.version))
            .map(|(&s, _)| s)
            .collect();
        for &s in &stale {
            self.remove(s);
        }
        stale
    }
}
