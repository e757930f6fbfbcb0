//! Byte image of one HNSW index.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "HNSW" (0x57534e48 LE)
//!      4     2  version (1)
//!      6     1  metric (0 = euclidean, 1 = angular)
//!      7     1  flags (bit 0 heuristic selection, bit 1 level cap present)
//!      8     4  dim
//!     12     4  M
//!     16     8  ntotal
//!     24     4  entry_point
//!     28     4  max_level
//!     32     4  e_build
//!     36     4  level_cap
//!     40     8  level_lambda (f64)
//!     48     8  rng_seed
//!     56     4  e_search
//!     60     4  reserved (0)
//!     64    80  five (len u64, cap u64) pairs: levels, offsets, neighbors,
//!               vectors, labels
//!    144        levels   [cap bytes: len payload + gap]
//!               offsets  [cap bytes]
//!               neighbors[cap bytes]
//!               vectors  [cap bytes]
//!               labels   [cap bytes]
//! ```
//!
//! All integers are little-endian. Element widths are 4 bytes for levels,
//! neighbors and vectors and 8 bytes for offsets and labels. `len` is the
//! logical byte length of an array and `cap` the space reserved for it in the
//! image. Once `len > cap` the remainder lives outside the image (in the
//! group overflow region) and must be stitched back with
//! [`crate::layout::splice`] before decoding.

use super::{HnswIndex, HnswParams};
use crate::error::{Error, Result};
use crate::layout::GapPolicy;
use crate::vector::Metric;

pub const HEADER_LEN: usize = 144;
const MAGIC: u32 = 0x5753_4e48;
const VERSION: u16 = 1;
const ARRAYS_AT: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum ArrayKind {
    Levels = 0,
    Offsets = 1,
    Neighbors = 2,
    Vectors = 3,
    Labels = 4,
}

impl ArrayKind {
    pub const ALL: [ArrayKind; 5] = [
        ArrayKind::Levels,
        ArrayKind::Offsets,
        ArrayKind::Neighbors,
        ArrayKind::Vectors,
        ArrayKind::Labels,
    ];

    pub fn elem_size(self) -> usize {
        match self {
            ArrayKind::Offsets | ArrayKind::Labels => 8,
            _ => 4,
        }
    }

    pub fn from_u32(v: u32) -> Option<Self> {
        Self::ALL.get(v as usize).copied()
    }

    /// Byte offset of this array's `(len, cap)` pair inside the header.
    pub fn header_field(self) -> usize {
        ARRAYS_AT + 16 * self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ArrayExtent {
    pub len: u64,
    pub cap: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageHeader {
    pub metric: Metric,
    pub heuristic: bool,
    pub dim: u32,
    pub m: u32,
    pub ntotal: u64,
    pub entry_point: u32,
    pub max_level: u32,
    pub e_build: u32,
    pub level_cap: Option<u32>,
    pub level_lambda: f64,
    pub rng_seed: u64,
    pub e_search: u32,
    pub arrays: [ArrayExtent; 5],
}

impl ImageHeader {
    pub fn array(&self, kind: ArrayKind) -> ArrayExtent {
        self.arrays[kind as usize]
    }

    /// Start of `kind`'s reserved space, relative to the image start.
    pub fn array_start(&self, kind: ArrayKind) -> u64 {
        HEADER_LEN as u64
            + ArrayKind::ALL[..kind as usize]
                .iter()
                .map(|&k| self.array(k).cap)
                .sum::<u64>()
    }

    /// Header plus every reserved array span: the length of the base image.
    pub fn image_len(&self) -> u64 {
        HEADER_LEN as u64 + self.arrays.iter().map(|a| a.cap).sum::<u64>()
    }

    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[0..4].copy_from_slice(&MAGIC.to_le_bytes());
        b[4..6].copy_from_slice(&VERSION.to_le_bytes());
        b[6] = self.metric.to_byte();
        b[7] = (self.heuristic as u8) | ((self.level_cap.is_some() as u8) << 1);
        b[8..12].copy_from_slice(&self.dim.to_le_bytes());
        b[12..16].copy_from_slice(&self.m.to_le_bytes());
        b[16..24].copy_from_slice(&self.ntotal.to_le_bytes());
        b[24..28].copy_from_slice(&self.entry_point.to_le_bytes());
        b[28..32].copy_from_slice(&self.max_level.to_le_bytes());
        b[32..36].copy_from_slice(&self.e_build.to_le_bytes());
        b[36..40].copy_from_slice(&self.level_cap.unwrap_or(0).to_le_bytes());
        b[40..48].copy_from_slice(&self.level_lambda.to_le_bytes());
        b[48..56].copy_from_slice(&self.rng_seed.to_le_bytes());
        b[56..60].copy_from_slice(&self.e_search.to_le_bytes());
        for kind in ArrayKind::ALL {
            let at = kind.header_field();
            let a = self.array(kind);
            b[at..at + 8].copy_from_slice(&a.len.to_le_bytes());
            b[at + 8..at + 16].copy_from_slice(&a.cap.to_le_bytes());
        }
        b
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated {
                needed: HEADER_LEN as u64,
                available: bytes.len() as u64,
            });
        }
        let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        let u64_at = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
        if u32_at(0) != MAGIC {
            return Err(Error::Malformed("bad magic".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(Error::Malformed(format!("unsupported version {version}")));
        }
        let metric = Metric::from_byte(bytes[6]).ok_or_else(|| Error::Malformed("bad metric".into()))?;
        let flags = bytes[7];
        let mut arrays = [ArrayExtent::default(); 5];
        for kind in ArrayKind::ALL {
            let at = kind.header_field();
            let a = ArrayExtent {
                len: u64_at(at),
                cap: u64_at(at + 8),
            };
            let w = kind.elem_size() as u64;
            if a.len % w != 0 || a.cap % w != 0 {
                return Err(Error::Malformed(format!("{kind:?} sizes not element aligned")));
            }
            arrays[kind as usize] = a;
        }
        Ok(Self {
            metric,
            heuristic: flags & 1 != 0,
            dim: u32_at(8),
            m: u32_at(12),
            ntotal: u64_at(16),
            entry_point: u32_at(24),
            max_level: u32_at(28),
            e_build: u32_at(32),
            level_cap: (flags & 2 != 0).then(|| u32_at(36)),
            level_lambda: f64::from_le_bytes(bytes[40..48].try_into().unwrap()),
            rng_seed: u64_at(48),
            e_search: u32_at(56),
            arrays,
        })
    }

    fn params(&self) -> HnswParams {
        HnswParams {
            m: self.m as usize,
            e_build: self.e_build as usize,
            e_search: self.e_search as usize,
            level_lambda: self.level_lambda,
            rng_seed: self.rng_seed,
            heuristic: self.heuristic,
            level_cap: self.level_cap,
        }
    }
}

/// A serialized index: header followed by the gapped arrays.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubImage(Vec<u8>);

impl SubImage {
    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn header(&self) -> Result<ImageHeader> {
        ImageHeader::decode(&self.0)
    }

    /// Bytes of actual data, excluding gaps.
    pub fn payload_len(&self) -> Result<u64> {
        Ok(self.header()?.arrays.iter().map(|a| a.len).sum())
    }
}

/// Reserve `ceil(len * fraction)` extra bytes, rounded up to whole elements.
pub(crate) fn gapped_cap(len: u64, elem: usize, fraction: f64) -> u64 {
    let gap = (len as f64 * fraction).ceil() as u64;
    let elem = elem as u64;
    len + gap.div_ceil(elem) * elem
}

/// Borrowed view of a logical image whose arrays may be split across
/// several buffers.
#[derive(Debug, Clone)]
pub struct ImageView<'a> {
    pub header: ImageHeader,
    pub segments: [Vec<&'a [u8]>; 5],
}

impl<'a> ImageView<'a> {
    /// View over a single base image with every array inside its reservation.
    pub fn contiguous(bytes: &'a [u8]) -> Result<Self> {
        let header = ImageHeader::decode(bytes)?;
        let need = header.image_len();
        if (bytes.len() as u64) < need {
            return Err(Error::Truncated {
                needed: need,
                available: bytes.len() as u64,
            });
        }
        let mut segments: [Vec<&[u8]>; 5] = Default::default();
        for kind in ArrayKind::ALL {
            let a = header.array(kind);
            if a.len > a.cap {
                return Err(Error::Inconsistent(format!(
                    "{kind:?} spills past its reservation; splice the overflow first"
                )));
            }
            let start = header.array_start(kind) as usize;
            segments[kind as usize].push(&bytes[start..start + a.len as usize]);
        }
        Ok(Self { header, segments })
    }

    fn array_len(&self, kind: ArrayKind) -> u64 {
        self.segments[kind as usize].iter().map(|s| s.len() as u64).sum()
    }

    fn decode_array<T>(&self, kind: ArrayKind, f: impl Fn(&[u8]) -> T) -> Result<Vec<T>> {
        let w = kind.elem_size();
        let mut out = Vec::with_capacity(self.array_len(kind) as usize / w);
        for seg in &self.segments[kind as usize] {
            if seg.len() % w != 0 {
                return Err(Error::Malformed(format!("{kind:?} segment not element aligned")));
            }
            out.extend(seg.chunks_exact(w).map(&f));
        }
        Ok(out)
    }

    /// Decodes straight from the borrowed segments into the index arrays.
    pub fn decode(&self) -> Result<HnswIndex> {
        let h = &self.header;
        for kind in ArrayKind::ALL {
            let got = self.array_len(kind);
            if got != h.array(kind).len {
                return Err(Error::Inconsistent(format!(
                    "{kind:?}: header says {} bytes, segments hold {got}",
                    h.array(kind).len
                )));
            }
        }
        let n = h.ntotal as usize;
        let dim = h.dim as usize;
        let expect = |kind: ArrayKind, elems: usize| -> Result<()> {
            if h.array(kind).len != (elems * kind.elem_size()) as u64 {
                return Err(Error::Malformed(format!("{kind:?} length disagrees with ntotal")));
            }
            Ok(())
        };
        expect(ArrayKind::Levels, n)?;
        expect(ArrayKind::Offsets, n + 1)?;
        expect(ArrayKind::Vectors, n * dim)?;
        expect(ArrayKind::Labels, n)?;
        let u32le = |c: &[u8]| u32::from_le_bytes(c.try_into().unwrap());
        let u64le = |c: &[u8]| u64::from_le_bytes(c.try_into().unwrap());
        HnswIndex::from_parts(
            h.params(),
            h.metric,
            dim,
            self.decode_array(ArrayKind::Levels, u32le)?,
            self.decode_array(ArrayKind::Offsets, u64le)?,
            self.decode_array(ArrayKind::Neighbors, u32le)?,
            self.decode_array(ArrayKind::Vectors, |c| f32::from_le_bytes(c.try_into().unwrap()))?,
            self.decode_array(ArrayKind::Labels, u64le)?,
            h.entry_point,
            h.max_level,
        )
    }
}

impl HnswIndex {
    pub fn header(&self, policy: &GapPolicy) -> ImageHeader {
        let lens = self.array_lens();
        let mut arrays = [ArrayExtent::default(); 5];
        for kind in ArrayKind::ALL {
            let len = lens[kind as usize];
            arrays[kind as usize] = ArrayExtent {
                len,
                cap: gapped_cap(len, kind.elem_size(), policy.internal_gap_fraction),
            };
        }
        let p = self.params();
        ImageHeader {
            metric: self.metric(),
            heuristic: p.heuristic,
            dim: self.dim() as u32,
            m: p.m as u32,
            ntotal: self.ntotal() as u64,
            entry_point: self.entry_point(),
            max_level: self.max_level(),
            e_build: p.e_build as u32,
            level_cap: p.level_cap,
            level_lambda: p.level_lambda,
            rng_seed: p.rng_seed,
            e_search: p.e_search as u32,
            arrays,
        }
    }

    pub fn array_lens(&self) -> [u64; 5] {
        [
            (self.levels().len() * 4) as u64,
            (self.offsets().len() * 8) as u64,
            (self.neighbors().len() * 4) as u64,
            (self.vectors().len() * 4) as u64,
            (self.labels().len() * 8) as u64,
        ]
    }

    /// Little-endian bytes of one array's logical contents.
    pub fn array_bytes(&self, kind: ArrayKind) -> Vec<u8> {
        match kind {
            ArrayKind::Levels => self.levels().iter().flat_map(|x| x.to_le_bytes()).collect(),
            ArrayKind::Offsets => self.offsets().iter().flat_map(|x| x.to_le_bytes()).collect(),
            ArrayKind::Neighbors => self.neighbors().iter().flat_map(|x| x.to_le_bytes()).collect(),
            ArrayKind::Vectors => self.vectors().iter().flat_map(|x| x.to_le_bytes()).collect(),
            ArrayKind::Labels => self.labels().iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    /// Little-endian bytes of `kind` in the element range `[from, to)`.
    pub fn array_byte_range(&self, kind: ArrayKind, from: usize, to: usize) -> Vec<u8> {
        match kind {
            ArrayKind::Levels => self.levels()[from..to].iter().flat_map(|x| x.to_le_bytes()).collect(),
            ArrayKind::Offsets => self.offsets()[from..to].iter().flat_map(|x| x.to_le_bytes()).collect(),
            ArrayKind::Neighbors => self.neighbors()[from..to].iter().flat_map(|x| x.to_le_bytes()).collect(),
            ArrayKind::Vectors => self.vectors()[from..to].iter().flat_map(|x| x.to_le_bytes()).collect(),
            ArrayKind::Labels => self.labels()[from..to].iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    pub fn serialize(&self, policy: &GapPolicy) -> SubImage {
        let header = self.header(policy);
        let mut out = Vec::with_capacity(header.image_len() as usize);
        out.extend_from_slice(&header.encode());
        for kind in ArrayKind::ALL {
            let bytes = self.array_bytes(kind);
            let cap = header.array(kind).cap as usize;
            out.extend_from_slice(&bytes);
            out.resize(out.len() + cap - bytes.len(), 0);
        }
        SubImage(out)
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Self> {
        ImageView::contiguous(bytes)?.decode()
    }
}
