//! Remote-memory layout of one index epoch.
//!
//! ```text
//! region offset
//!   0                 generation word (u64); active metadata copy = generation & 1
//!   8                 GlobalMeta copy 0 (meta_slot_len(P) bytes)
//!   8 + S             GlobalMeta copy 1
//!   8 + 2S (aligned)  meta-index image (a SubImage over the centroids)
//!   ...               groups, 8-byte aligned:
//!                       [ sub 2g image | shared overflow | sub 2g+1 image ]
//! ```
//!
//! The first sub of a group spills forward from the start of the overflow
//! region, the second backward from its end. Forward records are
//! `kind u32 | len u32 | payload`; backward records are `payload | kind u32 |
//! len u32` written at descending addresses, so walking from the overflow end
//! recovers write order. A sub's fetch plan is its base image range plus, if
//! non-empty, its used overflow slice: at most two ranges, one doorbell.
//!
//! Metadata is committed by writing the full encoding to the inactive copy and
//! then bumping the generation word, so a reader sees either the old or the
//! new table.

pub mod fragmented;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fabric::{Op, RegionHandle, RemoteMemory};
use crate::hnsw::{ArrayKind, HnswIndex, ImageHeader, ImageView, SubImage};

const META_MAGIC: u32 = 0x4154_4d52; // "RMTA"
const META_VERSION: u16 = 1;
const META_FIXED: usize = 64;
pub const GENERATION_OFFSET: u64 = 0;
/// Bytes of framing around every overflow record.
pub const RECORD_FRAME: u64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GapPolicy {
    /// Reserved space after each array, as a fraction of its initial length.
    pub internal_gap_fraction: f64,
    /// Shared overflow per group, as a fraction of the group's base image bytes.
    pub overflow_fraction: f64,
}

impl Default for GapPolicy {
    fn default() -> Self {
        Self {
            internal_gap_fraction: 0.2,
            overflow_fraction: 0.25,
        }
    }
}

impl GapPolicy {
    pub fn none() -> Self {
        Self {
            internal_gap_fraction: 0.0,
            overflow_fraction: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |f: f64| (0.0..1.0).contains(&f);
        if !ok(self.internal_gap_fraction) || !ok(self.overflow_fraction) {
            return Err(Error::Config("gap fractions must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Forward,
    Backward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SubEntry {
    pub base_offset: u64,
    pub base_len: u64,
    /// Bumped by every commit to this sub; lets readers spot stale cache entries.
    pub version: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GroupEntry {
    pub overflow_offset: u64,
    pub overflow_len: u64,
    pub used_forward: u64,
    pub used_backward: u64,
}

impl GroupEntry {
    pub fn free(&self) -> u64 {
        self.overflow_len - self.used_forward - self.used_backward
    }

    pub fn end(&self) -> u64 {
        self.overflow_offset + self.overflow_len
    }
}

/// The offset and overflow tables of one epoch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlobalMeta {
    pub epoch: u64,
    /// Next global id handed to an inserted vector.
    pub next_label: u64,
    /// Set once an append could not be placed.
    pub rebuild_requested: bool,
    pub meta_index_offset: u64,
    pub meta_index_len: u64,
    pub region_len: u64,
    pub subs: Vec<SubEntry>,
    pub groups: Vec<GroupEntry>,
}

/// Encoded size of a metadata copy for `p` subs.
pub fn meta_slot_len(p: usize) -> u64 {
    (META_FIXED + 24 * p + 32 * p.div_ceil(2)) as u64
}

pub fn meta_copy_offset(copy: u64, p: usize) -> u64 {
    8 + (copy & 1) * meta_slot_len(p)
}

fn align8(x: u64) -> u64 {
    x.div_ceil(8) * 8
}

impl GlobalMeta {
    pub fn p(&self) -> usize {
        self.subs.len()
    }

    pub fn group_of(sub: usize) -> usize {
        sub / 2
    }

    pub fn direction(sub: usize) -> Direction {
        if sub % 2 == 0 {
            Direction::Forward
        } else {
            Direction::Backward
        }
    }

    pub fn sub(&self, sub: usize) -> Result<&SubEntry> {
        self.subs
            .get(sub)
            .ok_or_else(|| Error::invalid(format!("sub id {sub} out of range (P = {})", self.p())))
    }

    /// Overflow bytes currently owned by `sub`.
    pub fn overflow_used(&self, sub: usize) -> u64 {
        let g = &self.groups[Self::group_of(sub)];
        match Self::direction(sub) {
            Direction::Forward => g.used_forward,
            Direction::Backward => g.used_backward,
        }
    }

    /// True iff some group has no room left for even an empty record.
    pub fn any_overflow_full(&self) -> bool {
        self.groups.iter().any(|g| g.free() < RECORD_FRAME)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(meta_slot_len(self.p()) as usize);
        b.extend_from_slice(&META_MAGIC.to_le_bytes());
        b.extend_from_slice(&META_VERSION.to_le_bytes());
        b.extend_from_slice(&(self.rebuild_requested as u16).to_le_bytes());
        for x in [
            self.epoch,
            self.next_label,
            self.p() as u64,
            self.meta_index_offset,
            self.meta_index_len,
            self.region_len,
        ] {
            b.extend_from_slice(&x.to_le_bytes());
        }
        b.resize(META_FIXED, 0);
        for s in &self.subs {
            b.extend_from_slice(&s.base_offset.to_le_bytes());
            b.extend_from_slice(&s.base_len.to_le_bytes());
            b.extend_from_slice(&s.version.to_le_bytes());
        }
        for g in &self.groups {
            for x in [g.overflow_offset, g.overflow_len, g.used_forward, g.used_backward] {
                b.extend_from_slice(&x.to_le_bytes());
            }
        }
        b
    }

    /// Reads `P` from an encoded prefix of at least 64 bytes.
    pub fn peek_p(bytes: &[u8]) -> Result<usize> {
        if bytes.len() < META_FIXED {
            return Err(Error::Truncated {
                needed: META_FIXED as u64,
                available: bytes.len() as u64,
            });
        }
        if u32::from_le_bytes(bytes[0..4].try_into().unwrap()) != META_MAGIC {
            return Err(Error::Malformed("bad metadata magic".into()));
        }
        Ok(u64::from_le_bytes(bytes[24..32].try_into().unwrap()) as usize)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let p = Self::peek_p(bytes)?;
        let need = meta_slot_len(p);
        if (bytes.len() as u64) < need {
            return Err(Error::Truncated {
                needed: need,
                available: bytes.len() as u64,
            });
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != META_VERSION {
            return Err(Error::Malformed(format!("unsupported metadata version {version}")));
        }
        let u64_at = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
        let subs = (0..p)
            .map(|i| SubEntry {
                base_offset: u64_at(META_FIXED + 24 * i),
                base_len: u64_at(META_FIXED + 24 * i + 8),
                version: u64_at(META_FIXED + 24 * i + 16),
            })
            .collect();
        let gat = META_FIXED + 24 * p;
        let groups = (0..p.div_ceil(2))
            .map(|g| GroupEntry {
                overflow_offset: u64_at(gat + 32 * g),
                overflow_len: u64_at(gat + 32 * g + 8),
                used_forward: u64_at(gat + 32 * g + 16),
                used_backward: u64_at(gat + 32 * g + 24),
            })
            .collect();
        let meta = Self {
            rebuild_requested: u16::from_le_bytes([bytes[6], bytes[7]]) & 1 != 0,
            epoch: u64_at(8),
            next_label: u64_at(16),
            meta_index_offset: u64_at(32),
            meta_index_len: u64_at(40),
            region_len: u64_at(48),
            subs,
            groups,
        };
        meta.validate()?;
        Ok(meta)
    }

    /// Checks the table invariants: group counts, overflow accounting, and
    /// pairwise disjointness of every used range inside the region.
    pub fn validate(&self) -> Result<()> {
        let p = self.p();
        if p == 0 {
            return Err(Error::Inconsistent("metadata lists no sub-indexes".into()));
        }
        if self.groups.len() != p.div_ceil(2) {
            return Err(Error::Inconsistent("group count must be ceil(P/2)".into()));
        }
        let mut ranges: Vec<(u64, u64, String)> = vec![
            (0, 8 + 2 * meta_slot_len(p), "metadata".into()),
            (self.meta_index_offset, self.meta_index_len, "meta-index".into()),
        ];
        for (i, s) in self.subs.iter().enumerate() {
            ranges.push((s.base_offset, s.base_len, format!("sub {i} base")));
        }
        for (g, e) in self.groups.iter().enumerate() {
            match e.used_forward.checked_add(e.used_backward) {
                Some(u) if u <= e.overflow_len => {}
                _ => return Err(Error::Inconsistent(format!("group {g} overflow over-committed"))),
            }
            if 2 * g + 1 >= p && e.used_backward != 0 {
                return Err(Error::Inconsistent(format!("group {g} has no backward sub")));
            }
            ranges.push((e.overflow_offset, e.used_forward, format!("group {g} forward overflow")));
            ranges.push((e.end() - e.used_backward, e.used_backward, format!("group {g} backward overflow")));
            if e.end() > self.region_len {
                return Err(Error::Inconsistent(format!("group {g} overflow outside region")));
            }
        }
        ranges.retain(|r| r.1 > 0);
        ranges.sort();
        for w in ranges.windows(2) {
            if w[0].0 + w[0].1 > w[1].0 {
                return Err(Error::Inconsistent(format!("{} overlaps {}", w[0].2, w[1].2)));
            }
        }
        if let Some(last) = ranges.last() {
            if last.0 + last.1 > self.region_len {
                return Err(Error::Inconsistent(format!("{} extends past the region", last.2)));
            }
        }
        Ok(())
    }
}

/// Computes where every image and overflow region goes.
pub fn plan_geometry(image_lens: &[u64], meta_index_len: u64, policy: &GapPolicy) -> Result<GlobalMeta> {
    policy.validate()?;
    let p = image_lens.len();
    if p == 0 {
        return Err(Error::invalid("layout needs at least one sub-index image"));
    }
    let meta_index_offset = align8(8 + 2 * meta_slot_len(p));
    let mut at = align8(meta_index_offset + meta_index_len);
    let mut subs = vec![SubEntry::default(); p];
    let mut groups = Vec::with_capacity(p.div_ceil(2));
    for g in 0..p.div_ceil(2) {
        let a = 2 * g;
        let len_a = image_lens[a];
        let len_b = image_lens.get(a + 1).copied().unwrap_or(0);
        let ov = align8(((len_a + len_b) as f64 * policy.overflow_fraction).ceil() as u64);
        subs[a] = SubEntry {
            base_offset: at,
            base_len: len_a,
            version: 0,
        };
        let ov_off = align8(at + len_a);
        groups.push(GroupEntry {
            overflow_offset: ov_off,
            overflow_len: ov,
            used_forward: 0,
            used_backward: 0,
        });
        at = ov_off + ov;
        if a + 1 < p {
            subs[a + 1] = SubEntry {
                base_offset: at,
                base_len: len_b,
                version: 0,
            };
            at = align8(at + len_b);
        }
    }
    Ok(GlobalMeta {
        epoch: 0,
        next_label: 0,
        rebuild_requested: false,
        meta_index_offset,
        meta_index_len,
        region_len: at.max(8),
        subs,
        groups,
    })
}

/// Bytes a region must have to hold these images.
pub fn required_region_size(images: &[SubImage], meta_index: &SubImage, policy: &GapPolicy) -> Result<u64> {
    let lens: Vec<u64> = images.iter().map(|i| i.len() as u64).collect();
    Ok(plan_geometry(&lens, meta_index.len() as u64, policy)?.region_len)
}

/// Writes a complete layout into an existing region.
pub fn write_layout(
    fabric: &dyn RemoteMemory,
    region: RegionHandle,
    images: &[SubImage],
    meta_index: &SubImage,
    policy: &GapPolicy,
    epoch: u64,
    next_label: u64,
) -> Result<GlobalMeta> {
    let lens: Vec<u64> = images.iter().map(|i| i.len() as u64).collect();
    let mut meta = plan_geometry(&lens, meta_index.len() as u64, policy)?;
    if meta.region_len > region.size {
        return Err(Error::RegionTooSmall {
            required: meta.region_len,
            available: region.size,
        });
    }
    meta.region_len = region.size;
    meta.epoch = epoch;
    meta.next_label = next_label;
    fabric.write(region.id, meta.meta_index_offset, meta_index.as_bytes())?;
    for (img, s) in images.iter().zip(&meta.subs) {
        fabric.write(region.id, s.base_offset, img.as_bytes())?;
    }
    fabric.write(region.id, meta_copy_offset(0, meta.p()), &meta.encode())?;
    fabric.write(region.id, GENERATION_OFFSET, &0u64.to_le_bytes())?;
    Ok(meta)
}

/// Registers a region of exactly the required size and writes the layout.
pub fn build_layout(
    fabric: &dyn RemoteMemory,
    images: &[SubImage],
    meta_index: &SubImage,
    policy: &GapPolicy,
    epoch: u64,
    next_label: u64,
) -> Result<(RegionHandle, GlobalMeta)> {
    let size = required_region_size(images, meta_index, policy)?;
    let region = fabric.register_region(size)?;
    match write_layout(fabric, region, images, meta_index, policy, epoch, next_label) {
        Ok(meta) => Ok((region, meta)),
        Err(e) => {
            let _ = fabric.free_region(region.id);
            Err(e)
        }
    }
}

/// Reads the active metadata copy. `p_hint` saves a round trip when the
/// sub count is already known.
pub fn read_meta(fabric: &dyn RemoteMemory, region: u32, p_hint: Option<usize>) -> Result<(u64, GlobalMeta)> {
    let p = match p_hint {
        Some(p) => p,
        None => GlobalMeta::peek_p(&fabric.read(region, 8, META_FIXED as u64)?.value)?,
    };
    let slot = meta_slot_len(p);
    let bytes = fabric.read(region, 0, 8 + 2 * slot)?.value;
    let gen = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    let at = meta_copy_offset(gen, p) as usize;
    let meta = GlobalMeta::decode(&bytes[at..at + slot as usize])?;
    if meta.p() != p {
        return Err(Error::Inconsistent("metadata sub count changed under a reader".into()));
    }
    Ok((gen, meta))
}

/// The two writes that commit `meta` as generation `gen + 1`. The flip must
/// be the last operation applied.
pub fn meta_commit_ops(region: u32, gen: u64, meta: &GlobalMeta) -> [Op; 2] {
    let next = gen + 1;
    [
        Op::Write {
            region,
            offset: meta_copy_offset(next, meta.p()),
            data: meta.encode(),
        },
        Op::Write {
            region,
            offset: GENERATION_OFFSET,
            data: next.to_le_bytes().to_vec(),
        },
    ]
}

pub fn read_meta_index(fabric: &dyn RemoteMemory, region: u32, meta: &GlobalMeta) -> Result<HnswIndex> {
    let bytes = fabric.read(region, meta.meta_index_offset, meta.meta_index_len)?.value;
    HnswIndex::deserialize(&bytes)
}

/// Read ranges for one sub-index; always issued as a single doorbell.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FetchPlan {
    pub sub_id: usize,
    pub region: u32,
    /// `(offset, len)`; the base image first, then the overflow slice if any.
    pub ranges: Vec<(u64, u64)>,
}

impl FetchPlan {
    pub fn ops(&self) -> Vec<Op> {
        self.ranges
            .iter()
            .map(|&(offset, len)| Op::Read {
                region: self.region,
                offset,
                len,
            })
            .collect()
    }

    pub fn bytes(&self) -> u64 {
        self.ranges.iter().map(|r| r.1).sum()
    }
}

pub fn plan_fetch(meta: &GlobalMeta, region: u32, sub: usize) -> Result<FetchPlan> {
    let s = *meta.sub(sub)?;
    let mut ranges = vec![(s.base_offset, s.base_len)];
    let used = meta.overflow_used(sub);
    if used > 0 {
        let g = &meta.groups[GlobalMeta::group_of(sub)];
        ranges.push(match GlobalMeta::direction(sub) {
            Direction::Forward => (g.overflow_offset, used),
            Direction::Backward => (g.end() - used, used),
        });
    }
    Ok(FetchPlan {
        sub_id: sub,
        region,
        ranges,
    })
}

/// One contiguous piece of a logical array and where it lives remotely.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Extent {
    pub logical: u64,
    pub len: u64,
    pub remote: u64,
}

/// Writer-side knowledge of a sub's remote image: its current header and
/// where each array's bytes are.
#[derive(Debug, Clone, PartialEq)]
pub struct SubSync {
    pub header: ImageHeader,
    pub extents: [Vec<Extent>; 5],
}

impl SubSync {
    /// Maps `[logical, logical + len)` of `kind` to `(remote, offset_in_range, len)` pieces.
    pub fn map_range(&self, kind: ArrayKind, logical: u64, len: u64) -> Result<Vec<(u64, u64, u64)>> {
        let mut out = Vec::new();
        let end = logical + len;
        for e in &self.extents[kind as usize] {
            let lo = logical.max(e.logical);
            let hi = end.min(e.logical + e.len);
            if lo < hi {
                out.push((e.remote + (lo - e.logical), lo - logical, hi - lo));
            }
        }
        let covered: u64 = out.iter().map(|p| p.2).sum();
        if covered != len {
            return Err(Error::Inconsistent(format!(
                "{kind:?} range {logical}+{len} is not fully mapped"
            )));
        }
        Ok(out)
    }
}

/// A sub-image reassembled from its fetched base and overflow bytes.
#[derive(Debug, Clone)]
pub struct Spliced<'a> {
    pub view: ImageView<'a>,
    pub sync: SubSync,
}

impl Spliced<'_> {
    pub fn decode(&self) -> Result<HnswIndex> {
        self.view.decode()
    }
}

fn parse_frame(frame: &[u8]) -> Result<(ArrayKind, u64)> {
    let kind = u32::from_le_bytes(frame[..4].try_into().unwrap());
    let len = u32::from_le_bytes(frame[4..8].try_into().unwrap()) as u64;
    let kind = ArrayKind::from_u32(kind).ok_or_else(|| Error::Inconsistent(format!("bad overflow record kind {kind}")))?;
    Ok((kind, len))
}

fn frame(kind: ArrayKind, len: u64) -> [u8; 8] {
    let mut f = [0u8; 8];
    f[..4].copy_from_slice(&(kind as u32).to_le_bytes());
    f[4..].copy_from_slice(&(len as u32).to_le_bytes());
    f
}

/// Stitches a sub's arrays back together: each array is its in-image part
/// followed by its overflow records in write order. Nothing is copied.
pub fn splice<'a>(base: &'a [u8], overflow: &'a [u8], meta: &GlobalMeta, sub: usize) -> Result<Spliced<'a>> {
    let entry = *meta.sub(sub)?;
    if base.len() as u64 != entry.base_len {
        return Err(Error::Inconsistent(format!(
            "base is {} bytes, table says {}",
            base.len(),
            entry.base_len
        )));
    }
    let used = meta.overflow_used(sub);
    if overflow.len() as u64 != used {
        return Err(Error::Inconsistent(format!(
            "overflow slice is {} bytes, table says {used}",
            overflow.len()
        )));
    }
    let header = ImageHeader::decode(base)?;
    if header.image_len() > entry.base_len {
        return Err(Error::Inconsistent("image reservations exceed base range".into()));
    }
    let mut segments: [Vec<&[u8]>; 5] = Default::default();
    let mut extents: [Vec<Extent>; 5] = Default::default();
    let mut filled = [0u64; 5];
    for kind in ArrayKind::ALL {
        let a = header.array(kind);
        let in_image = a.len.min(a.cap);
        let start = header.array_start(kind);
        segments[kind as usize].push(&base[start as usize..(start + in_image) as usize]);
        extents[kind as usize].push(Extent {
            logical: 0,
            len: in_image,
            remote: entry.base_offset + start,
        });
        filled[kind as usize] = in_image;
    }
    let g = meta.groups[GlobalMeta::group_of(sub)];
    let mut push = |kind: ArrayKind, payload: &'a [u8], remote: u64| {
        let k = kind as usize;
        segments[k].push(payload);
        extents[k].push(Extent {
            logical: filled[k],
            len: payload.len() as u64,
            remote,
        });
        filled[k] += payload.len() as u64;
    };
    let short = || Error::Inconsistent("overflow record runs past the used slice".into());
    match GlobalMeta::direction(sub) {
        Direction::Forward => {
            let mut at = 0usize;
            while at < overflow.len() {
                let fr = overflow.get(at..at + 8).ok_or_else(short)?;
                let (kind, len) = parse_frame(fr)?;
                let payload = overflow.get(at + 8..at + 8 + len as usize).ok_or_else(short)?;
                push(kind, payload, g.overflow_offset + (at + 8) as u64);
                at += 8 + len as usize;
            }
        }
        Direction::Backward => {
            let slice_start = g.end() - used;
            let mut end = overflow.len();
            while end > 0 {
                let fr = overflow.get(end.checked_sub(8).ok_or_else(short)?..end).ok_or_else(short)?;
                let (kind, len) = parse_frame(fr)?;
                let pstart = (end - 8).checked_sub(len as usize).ok_or_else(short)?;
                push(kind, &overflow[pstart..end - 8], slice_start + pstart as u64);
                end = pstart;
            }
        }
    }
    for kind in ArrayKind::ALL {
        if filled[kind as usize] != header.array(kind).len {
            return Err(Error::Inconsistent(format!(
                "{kind:?}: header says {} bytes, image plus overflow hold {}",
                header.array(kind).len,
                filled[kind as usize]
            )));
        }
    }
    Ok(Spliced {
        view: ImageView {
            header: header.clone(),
            segments,
        },
        sync: SubSync { header, extents },
    })
}

/// Writer state for a freshly laid-out sub whose arrays all sit in its image.
pub fn fresh_sync(image: &SubImage, entry: &SubEntry) -> Result<SubSync> {
    let header = image.header()?;
    let extents = ArrayKind::ALL.map(|kind| {
        vec![Extent {
            logical: 0,
            len: header.array(kind).len,
            remote: entry.base_offset + header.array_start(kind),
        }]
    });
    Ok(SubSync { header, extents })
}

/// Where the bytes of one array append go.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Placement {
    Placed {
        /// Part placed in the array's internal gap: `(remote, len)`.
        gap: Option<(u64, u64)>,
        /// Part placed in the group overflow.
        overflow: Option<OverflowRecord>,
    },
    RebuildRequired,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OverflowRecord {
    pub frame_offset: u64,
    pub frame: [u8; 8],
    pub payload_offset: u64,
    pub payload_len: u64,
}

/// Places `nbytes` appended to `kind` of `sub`: internal gap first, then the
/// sub's side of the group overflow. On success `meta` and `sync` are updated
/// to include the append; on `RebuildRequired` neither is changed.
pub fn alloc_append(meta: &mut GlobalMeta, sync: &mut SubSync, sub: usize, kind: ArrayKind, nbytes: u64) -> Result<Placement> {
    if nbytes == 0 {
        return Err(Error::invalid("append size must be positive"));
    }
    if nbytes % kind.elem_size() as u64 != 0 {
        return Err(Error::invalid("append size must be a whole number of elements"));
    }
    let entry = *meta.sub(sub)?;
    let a = sync.header.array(kind);
    let gap_left = a.cap.saturating_sub(a.len);
    let gap_take = gap_left.min(nbytes);
    let spill = nbytes - gap_take;
    let gi = GlobalMeta::group_of(sub);
    if spill > 0 && (spill > u32::MAX as u64 || meta.groups[gi].free() < spill + RECORD_FRAME) {
        return Ok(Placement::RebuildRequired);
    }
    let k = kind as usize;
    let gap = (gap_take > 0).then(|| {
        let remote = entry.base_offset + sync.header.array_start(kind) + a.len;
        sync.extents[k].push(Extent {
            logical: a.len,
            len: gap_take,
            remote,
        });
        (remote, gap_take)
    });
    let overflow = (spill > 0).then(|| {
        let g = &mut meta.groups[gi];
        let rec = match GlobalMeta::direction(sub) {
            Direction::Forward => {
                let at = g.overflow_offset + g.used_forward;
                g.used_forward += spill + RECORD_FRAME;
                OverflowRecord {
                    frame_offset: at,
                    frame: frame(kind, spill),
                    payload_offset: at + RECORD_FRAME,
                    payload_len: spill,
                }
            }
            Direction::Backward => {
                let end = g.end() - g.used_backward;
                g.used_backward += spill + RECORD_FRAME;
                OverflowRecord {
                    frame_offset: end - RECORD_FRAME,
                    frame: frame(kind, spill),
                    payload_offset: end - RECORD_FRAME - spill,
                    payload_len: spill,
                }
            }
        };
        sync.extents[k].push(Extent {
            logical: a.len + gap_take,
            len: spill,
            remote: rec.payload_offset,
        });
        rec
    });
    sync.header.arrays[k].len += nbytes;
    Ok(Placement::Placed { gap, overflow })
}

/// Fetches, splices and decodes one sub with a single doorbell.
pub fn fetch_sub(fabric: &dyn RemoteMemory, region: u32, meta: &GlobalMeta, sub: usize) -> Result<(HnswIndex, SubSync)> {
    let plan = plan_fetch(meta, region, sub)?;
    let bufs = fabric.doorbell(plan.ops())?.value;
    let overflow: &[u8] = bufs.get(1).map(|v| v.as_slice()).unwrap_or(&[]);
    let spliced = splice(&bufs[0], overflow, meta, sub)?;
    Ok((spliced.decode()?, spliced.sync))
}
