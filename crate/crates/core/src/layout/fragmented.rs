//! Deliberately fragmented baseline layout.
//!
//! Images are packed back to back with no reserved space. Inserted vectors
//! go to an append-only log at the region tail; each record points at the
//! previous record of the same sub, so a reader learns the next address only
//! after the previous read completes (pointer chasing). Fetching a sub costs
//! one round trip for the image plus one per log record.
//!
//! Record: `prev_offset u64 | prev_len u64 | count u32 | dim u32 |
//! labels [count u64] | vectors [count * dim f32]`, with
//! `prev_offset = u64::MAX` ending the chain.

use crate::error::{Error, Result};
use crate::fabric::{RegionHandle, RemoteMemory};
use crate::hnsw::{HnswIndex, SubImage};

const NO_RECORD: u64 = u64::MAX;
const RECORD_HEADER: usize = 24;

#[derive(Debug, Clone)]
pub struct FragmentedLayout {
    pub region: RegionHandle,
    /// `(offset, len)` of each packed image.
    pub images: Vec<(u64, u64)>,
    /// `(offset, len)` of each sub's newest log record.
    heads: Vec<Option<(u64, u64)>>,
    tail: u64,
}

/// A fetched sub and the round trips it took.
#[derive(Debug, Clone)]
pub struct FragmentedFetch {
    pub index: HnswIndex,
    pub round_trips: u64,
}

impl FragmentedLayout {
    pub fn build(fabric: &dyn RemoteMemory, images: &[SubImage], log_capacity: u64) -> Result<Self> {
        let total: u64 = images.iter().map(|i| i.len() as u64).sum();
        let region = fabric.register_region(total + log_capacity.max(1))?;
        let mut at = 0u64;
        let mut placed = Vec::with_capacity(images.len());
        for img in images {
            fabric.write(region.id, at, img.as_bytes())?;
            placed.push((at, img.len() as u64));
            at += img.len() as u64;
        }
        Ok(Self {
            region,
            heads: vec![None; images.len()],
            images: placed,
            tail: at,
        })
    }

    /// Appends one log record for `sub` with a single write.
    pub fn append(&mut self, fabric: &dyn RemoteMemory, sub: usize, dim: usize, vectors: &[f32], labels: &[u64]) -> Result<()> {
        if sub >= self.images.len() {
            return Err(Error::invalid(format!("sub id {sub} out of range")));
        }
        if labels.is_empty() || vectors.len() != labels.len() * dim {
            return Err(Error::invalid("record needs one label per vector"));
        }
        let (prev_off, prev_len) = self.heads[sub].unwrap_or((NO_RECORD, 0));
        let mut rec = Vec::with_capacity(RECORD_HEADER + labels.len() * 8 + vectors.len() * 4);
        rec.extend_from_slice(&prev_off.to_le_bytes());
        rec.extend_from_slice(&prev_len.to_le_bytes());
        rec.extend_from_slice(&(labels.len() as u32).to_le_bytes());
        rec.extend_from_slice(&(dim as u32).to_le_bytes());
        rec.extend(labels.iter().flat_map(|l| l.to_le_bytes()));
        rec.extend(vectors.iter().flat_map(|v| v.to_le_bytes()));
        let len = rec.len() as u64;
        if self.tail + len > self.region.size {
            return Err(Error::RegionTooSmall {
                required: self.tail + len,
                available: self.region.size,
            });
        }
        fabric.write(self.region.id, self.tail, &rec)?;
        self.heads[sub] = Some((self.tail, len));
        self.tail += len;
        Ok(())
    }

    /// Reads the image, then walks the record chain one read at a time and
    /// replays the logged inserts in their original order.
    pub fn fetch(&self, fabric: &dyn RemoteMemory, sub: usize) -> Result<FragmentedFetch> {
        let &(off, len) = self
            .images
            .get(sub)
            .ok_or_else(|| Error::invalid(format!("sub id {sub} out of range")))?;
        let mut round_trips = 1;
        let mut index = HnswIndex::deserialize(&fabric.read(self.region.id, off, len)?.value)?;
        let mut records = Vec::new();
        let mut next = self.heads[sub];
        while let Some((o, l)) = next {
            let rec = fabric.read(self.region.id, o, l)?.value;
            round_trips += 1;
            let u64_at = |at: usize| u64::from_le_bytes(rec[at..at + 8].try_into().unwrap());
            next = (u64_at(0) != NO_RECORD).then(|| (u64_at(0), u64_at(8)));
            records.push(rec);
        }
        for rec in records.iter().rev() {
            let count = u32::from_le_bytes(rec[16..20].try_into().unwrap()) as usize;
            let dim = u32::from_le_bytes(rec[20..24].try_into().unwrap()) as usize;
            if rec.len() != RECORD_HEADER + count * 8 + count * dim * 4 {
                return Err(Error::Malformed("log record length disagrees with its header".into()));
            }
            let vec_at = RECORD_HEADER + count * 8;
            for i in 0..count {
                let label = u64::from_le_bytes(rec[RECORD_HEADER + 8 * i..RECORD_HEADER + 8 * i + 8].try_into().unwrap());
                let v: Vec<f32> = rec[vec_at + i * dim * 4..vec_at + (i + 1) * dim * 4]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                index.insert(&v, label)?;
            }
        }
        Ok(FragmentedFetch { index, round_trips })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fabric::{CostModel, Fabric};
    use crate::hnsw::HnswParams;
    use crate::layout::GapPolicy;
    use crate::vector::{Metric, VectorStore};

    #[test]
    fn replayed_log_matches_writer_and_costs_extra_round_trips() {
        let fabric = Fabric::new(CostModel::default());
        let data: Vec<f32> = (0..40 * 4).map(|i| ((i * 37) % 101) as f32).collect();
        let store = VectorStore::from_flat(4, data, Metric::Euclidean).unwrap();
        let mut local = HnswIndex::build(&store, HnswParams::with_m(4)).unwrap();
        let mut layout = FragmentedLayout::build(&fabric, &[local.serialize(&GapPolicy::none())], 4096).unwrap();
        assert_eq!(layout.fetch(&fabric, 0).unwrap().round_trips, 1);
        for r in 0..3u64 {
            let v: Vec<f32> = (0..8).map(|i| (i as f32) * 1.5 + r as f32).collect();
            let labels = [100 + 2 * r, 101 + 2 * r];
            for (chunk, &l) in v.chunks(4).zip(&labels) {
                local.insert(chunk, l).unwrap();
            }
            layout.append(&fabric, 0, 4, &v, &labels).unwrap();
        }
        let got = layout.fetch(&fabric, 0).unwrap();
        assert_eq!(got.round_trips, 4);
        assert_eq!(got.index, local);
    }
}
