//! Dense vector storage, distance metrics, and `.fvecs`/`.bvecs`/`.ivecs` I/O.
//!
//! Vectors are 32-bit floats in memory; distance sums accumulate in `f64`.
//! Both metrics are "smaller is closer": Euclidean is squared L2 and Angular
//! is `1 - cos(a, b)`. Angular distances use the stored values as-is, so
//! callers that want unit vectors should run [`VectorStore::normalize`] first.

use std::cmp::Ordering;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Euclidean,
    Angular,
}

impl Metric {
    pub(crate) fn to_byte(self) -> u8 {
        match self {
            Metric::Euclidean => 0,
            Metric::Angular => 1,
        }
    }

    pub(crate) fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Metric::Euclidean),
            1 => Some(Metric::Angular),
            _ => None,
        }
    }
}

/// Distance between two equal-length slices. Panics in debug builds on a
/// length mismatch; use [`distance`] for the checked variant.
#[inline]
pub fn distance_unchecked(a: &[f32], b: &[f32], metric: Metric) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    match metric {
        Metric::Euclidean => {
            let mut acc = 0.0f64;
            for (x, y) in a.iter().zip(b) {
                let d = (*x - *y) as f64;
                acc += d * d;
            }
            acc as f32
        }
        Metric::Angular => {
            let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
            for (x, y) in a.iter().zip(b) {
                let (x, y) = (*x as f64, *y as f64);
                dot += x * y;
                na += x * x;
                nb += y * y;
            }
            if na == 0.0 || nb == 0.0 {
                return 1.0;
            }
            let cos = (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0);
            // Rounding can leave a tiny negative value for identical inputs.
            (1.0 - cos).max(0.0) as f32
        }
    }
}

pub fn distance(a: &[f32], b: &[f32], metric: Metric) -> Result<f32> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(distance_unchecked(a, b, metric))
}

/// A search hit. Ordered by distance, then by smaller id.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: u64,
    pub distance: f32,
}

impl Neighbor {
    pub fn new(id: u64, distance: f32) -> Self {
        Self { id, distance }
    }
}

impl Eq for Neighbor {}

impl PartialOrd for Neighbor {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Neighbor {
    fn cmp(&self, other: &Self) -> Ordering {
        self.distance
            .total_cmp(&other.distance)
            .then_with(|| self.id.cmp(&other.id))
    }
}

/// Row-major matrix of `count` vectors of dimension `dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorStore {
    dim: usize,
    data: Vec<f32>,
    metric: Metric,
}

impl VectorStore {
    pub fn new(dim: usize, metric: Metric) -> Self {
        Self {
            dim,
            data: Vec::new(),
            metric,
        }
    }

    pub fn from_flat(dim: usize, data: Vec<f32>, metric: Metric) -> Result<Self> {
        if dim == 0 && !data.is_empty() {
            return Err(Error::invalid("dimension must be positive"));
        }
        if dim > 0 && data.len() % dim != 0 {
            return Err(Error::invalid(format!(
                "data length {} is not a multiple of dim {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, data, metric })
    }

    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R], metric: Metric) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.as_ref().len());
        let mut store = Self::new(dim, metric);
        for r in rows {
            store.push(r.as_ref())?;
        }
        Ok(store)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn as_flat(&self) -> &[f32] {
        &self.data
    }

    pub fn into_flat(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        self.data.chunks_exact(self.dim.max(1))
    }

    pub fn push(&mut self, v: &[f32]) -> Result<()> {
        if self.dim == 0 && self.data.is_empty() {
            if v.is_empty() {
                return Err(Error::invalid("dimension must be positive"));
            }
            self.dim = v.len();
        }
        if v.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: v.len(),
            });
        }
        self.data.extend_from_slice(v);
        Ok(())
    }

    /// Copy of the rows at `ids`, in order.
    pub fn select(&self, ids: &[usize]) -> VectorStore {
        let mut data = Vec::with_capacity(ids.len() * self.dim);
        for &i in ids {
            data.extend_from_slice(self.get(i));
        }
        VectorStore {
            dim: self.dim,
            data,
            metric: self.metric,
        }
    }

    /// Scales every nonzero row to unit L2 norm.
    pub fn normalize(&mut self) {
        if self.dim == 0 {
            return;
        }
        for row in self.data.chunks_exact_mut(self.dim) {
            normalize_in_place(row);
        }
    }

    pub fn distance_to(&self, i: usize, q: &[f32]) -> f32 {
        distance_unchecked(self.get(i), q, self.metric)
    }
}

pub fn normalize_in_place(row: &mut [f32]) {
    let norm = row.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in row.iter_mut() {
            *x = (*x as f64 / norm) as f32;
        }
    }
}

/// Exact top-k by linear scan. Ties go to the smaller id.
pub fn brute_force_topk(store: &VectorStore, q: &[f32], k: usize) -> Result<Vec<Neighbor>> {
    if k > store.len() {
        return Err(Error::invalid(format!(
            "k = {k} exceeds store size {}",
            store.len()
        )));
    }
    if q.len() != store.dim() {
        return Err(Error::DimensionMismatch {
            expected: store.dim(),
            got: q.len(),
        });
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut heap = std::collections::BinaryHeap::with_capacity(k + 1);
    for (i, row) in store.iter().enumerate() {
        let n = Neighbor::new(i as u64, distance_unchecked(row, q, store.metric()));
        if heap.len() < k {
            heap.push(n);
        } else if n < *heap.peek().unwrap() {
            heap.pop();
            heap.push(n);
        }
    }
    Ok(heap.into_sorted_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementKind {
    F32,
    U8,
    I32,
}

impl ElementKind {
    fn width(self) -> usize {
        match self {
            ElementKind::U8 => 1,
            ElementKind::F32 | ElementKind::I32 => 4,
        }
    }

    pub fn from_extension(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "fvecs" => Some(ElementKind::F32),
            "bvecs" => Some(ElementKind::U8),
            "ivecs" => Some(ElementKind::I32),
            _ => None,
        }
    }
}

/// Splits an xvecs byte buffer into `(dim, payload rows)`.
fn parse_records(bytes: &[u8], kind: ElementKind) -> Result<(usize, Vec<&[u8]>)> {
    let width = kind.width();
    let mut rows = Vec::new();
    let mut pos = 0usize;
    let mut dim: Option<usize> = None;
    while pos < bytes.len() {
        if bytes.len() - pos < 4 {
            return Err(Error::Parse {
                offset: pos as u64,
                message: "truncated dimension header".into(),
            });
        }
        let d = i32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap());
        if d <= 0 {
            return Err(Error::Parse {
                offset: pos as u64,
                message: format!("non-positive dimension {d}"),
            });
        }
        let d = d as usize;
        match dim {
            None => dim = Some(d),
            Some(expected) if expected != d => {
                return Err(Error::Parse {
                    offset: pos as u64,
                    message: format!("dimension {d} differs from first record's {expected}"),
                })
            }
            _ => {}
        }
        let start = pos + 4;
        let end = start + d * width;
        if end > bytes.len() {
            return Err(Error::Parse {
                offset: start as u64,
                message: format!(
                    "truncated record: need {} bytes, {} remain",
                    d * width,
                    bytes.len() - start
                ),
            });
        }
        rows.push(&bytes[start..end]);
        pos = end;
    }
    Ok((dim.unwrap_or(0), rows))
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut buf)?;
    Ok(buf)
}

/// Loads an xvecs file as floats. `u8` and `i32` elements are converted
/// exactly as long as they fit in an `f32` mantissa.
pub fn load_xvecs(path: impl AsRef<Path>, kind: ElementKind, metric: Metric) -> Result<VectorStore> {
    let bytes = read_all(path.as_ref())?;
    let (dim, rows) = parse_records(&bytes, kind)?;
    let mut data = Vec::with_capacity(rows.len() * dim);
    for row in rows {
        match kind {
            ElementKind::F32 => data.extend(
                row.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap())),
            ),
            ElementKind::U8 => data.extend(row.iter().map(|&b| b as f32)),
            ElementKind::I32 => data.extend(
                row.chunks_exact(4)
                    .map(|c| i32::from_le_bytes(c.try_into().unwrap()) as f32),
            ),
        }
    }
    VectorStore::from_flat(dim, data, metric)
}

/// Loads an `.ivecs` file as integer lists (ground truth, assignments).
pub fn load_ivecs(path: impl AsRef<Path>) -> Result<Vec<Vec<i32>>> {
    let bytes = read_all(path.as_ref())?;
    let (_, rows) = parse_records(&bytes, ElementKind::I32)?;
    Ok(rows
        .into_iter()
        .map(|row| {
            row.chunks_exact(4)
                .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                .collect()
        })
        .collect())
}

pub fn save_xvecs(store: &VectorStore, path: impl AsRef<Path>, kind: ElementKind) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    let dim = store.dim() as i32;
    for (r, row) in store.iter().enumerate() {
        w.write_all(&dim.to_le_bytes())?;
        for &x in row {
            match kind {
                ElementKind::F32 => w.write_all(&x.to_le_bytes())?,
                ElementKind::U8 => {
                    if !(0.0..=255.0).contains(&x) || x.fract() != 0.0 {
                        return Err(Error::invalid(format!("row {r}: {x} is not a u8 value")));
                    }
                    w.write_all(&[x as u8])?
                }
                ElementKind::I32 => {
                    if x.fract() != 0.0 {
                        return Err(Error::invalid(format!("row {r}: {x} is not an integer")));
                    }
                    w.write_all(&(x as i32).to_le_bytes())?
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_ivecs<R: AsRef<[i32]>>(rows: &[R], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    for row in rows {
        let row = row.as_ref();
        w.write_all(&(row.len() as i32).to_le_bytes())?;
        for x in row {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_l2(a: &[f32], b: &[f32]) -> f64 {
        let mut s = 0.0;
        for i in 0..a.len() {
            s += ((a[i] - b[i]) as f64).powi(2);
        }
        s
    }

    fn naive_angular(a: &[f32], b: &[f32]) -> f64 {
        let mut dot = 0.0;
        let mut na = 0.0;
        let mut nb = 0.0;
        for i in 0..a.len() {
            dot += a[i] as f64 * b[i] as f64;
            na += (a[i] as f64).powi(2);
            nb += (b[i] as f64).powi(2);
        }
        1.0 - dot / (na.sqrt() * nb.sqrt())
    }

    #[test]
    fn euclidean_is_squared() {
        assert_eq!(distance(&[0.0, 0.0], &[3.0, 4.0], Metric::Euclidean).unwrap(), 25.0);
    }

    #[test]
    fn self_distance_is_zero() {
        let x = [0.3f32, -1.2, 4.0];
        assert_eq!(distance(&x, &x, Metric::Euclidean).unwrap(), 0.0);
        assert_eq!(distance(&x, &x, Metric::Angular).unwrap(), 0.0);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        assert!(matches!(
            distance(&[1.0], &[1.0, 2.0], Metric::Euclidean),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn random_pairs_match_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let d = rng.random_range(1..64);
            let a: Vec<f32> = (0..d).map(|_| rng.random_range(-10.0..10.0)).collect();
            let b: Vec<f32> = (0..d).map(|_| rng.random_range(-10.0..10.0)).collect();
            let e = distance(&a, &b, Metric::Euclidean).unwrap() as f64;
            let want = naive_l2(&a, &b);
            assert!((e - want).abs() <= 1e-5 * want.max(1e-12), "{e} vs {want}");
            let g = distance(&a, &b, Metric::Angular).unwrap() as f64;
            let want = naive_angular(&a, &b);
            assert!((g - want).abs() <= 1e-5 * want.abs().max(1e-3), "{g} vs {want}");
        }
    }

    #[test]
    fn angular_does_not_normalize_storage() {
        let store = VectorStore::from_rows(&[[3.0f32, 4.0]], Metric::Angular).unwrap();
        let before = store.clone();
        let _ = store.distance_to(0, &[1.0, 0.0]);
        let _ = brute_force_topk(&store, &[1.0, 0.0], 1).unwrap();
        assert_eq!(store, before);
    }

    #[test]
    fn topk_small_example() {
        let store = VectorStore::from_rows(&[[0.0f32], [1.0], [2.0]], Metric::Euclidean).unwrap();
        let ids: Vec<u64> = brute_force_topk(&store, &[0.9], 2)
            .unwrap()
            .iter()
            .map(|n| n.id)
            .collect();
        assert_eq!(ids, vec![1, 0]);
        assert!(brute_force_topk(&store, &[0.9], 4).is_err());
    }

    #[test]
    fn topk_full_is_sorted_permutation_and_matches_full_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rows: Vec<Vec<f32>> = (0..300)
            .map(|_| (0..5).map(|_| rng.random_range(0..4) as f32).collect())
            .collect();
        let store = VectorStore::from_rows(&rows, Metric::Euclidean).unwrap();
        let q = [1.0f32, 2.0, 0.0, 3.0, 1.0];
        // Independent oracle: sort every (distance, id) pair.
        let mut all: Vec<(f64, u64)> = rows
            .iter()
            .enumerate()
            .map(|(i, r)| (naive_l2(r, &q), i as u64))
            .collect();
        all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let got = brute_force_topk(&store, &q, 300).unwrap();
        let got_ids: Vec<u64> = got.iter().map(|n| n.id).collect();
        let want_ids: Vec<u64> = all.iter().map(|p| p.1).collect();
        assert_eq!(got_ids, want_ids);
        let top = brute_force_topk(&store, &q, 17).unwrap();
        assert_eq!(&got_ids[..17], &top.iter().map(|n| n.id).collect::<Vec<_>>()[..]);
    }

    #[test]
    fn xvecs_two_records_is_24_bytes_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.fvecs");
        let store = VectorStore::from_rows(&[[1.5f32, -2.0], [0.0, 7.25]], Metric::Euclidean).unwrap();
        save_xvecs(&store, &p, ElementKind::F32).unwrap();
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 24);
        assert_eq!(load_xvecs(&p, ElementKind::F32, Metric::Euclidean).unwrap(), store);
    }

    #[test]
    fn empty_file_is_empty_store() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.fvecs");
        std::fs::write(&p, []).unwrap();
        let s = load_xvecs(&p, ElementKind::F32, Metric::Euclidean).unwrap();
        assert_eq!(s.len(), 0);
    }

    #[test]
    fn generated_corpus_reloads_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f32> = (0..800).map(|_| rng.random::<f32>() * 100.0 - 50.0).collect();
        let store = VectorStore::from_flat(8, data, Metric::Euclidean).unwrap();
        let p = dir.path().join("c.fvecs");
        save_xvecs(&store, &p, ElementKind::F32).unwrap();
        let back = load_xvecs(&p, ElementKind::F32, Metric::Euclidean).unwrap();
        assert_eq!(back.len(), 100);
        let a: Vec<u32> = store.as_flat().iter().map(|x| x.to_bits()).collect();
        let b: Vec<u32> = back.as_flat().iter().map(|x| x.to_bits()).collect();
        assert_eq!(a, b);

        let pb = dir.path().join("c.bvecs");
        let bytes = VectorStore::from_flat(3, vec![0.0, 255.0, 17.0], Metric::Euclidean).unwrap();
        save_xvecs(&bytes, &pb, ElementKind::U8).unwrap();
        assert_eq!(load_xvecs(&pb, ElementKind::U8, Metric::Euclidean).unwrap(), bytes);
    }

    #[test]
    fn inconsistent_and_truncated_files_name_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.fvecs");
        let mut bytes = Vec::new();
        bytes.extend(2i32.to_le_bytes());
        bytes.extend(1.0f32.to_le_bytes());
        bytes.extend(2.0f32.to_le_bytes());
        bytes.extend(3i32.to_le_bytes());
        bytes.extend([0u8; 12]);
        std::fs::write(&p, &bytes).unwrap();
        match load_xvecs(&p, ElementKind::F32, Metric::Euclidean) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 12),
            other => panic!("unexpected {other:?}"),
        }
        std::fs::write(&p, &bytes[..10]).unwrap();
        match load_xvecs(&p, ElementKind::F32, Metric::Euclidean) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ivecs_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("gt.ivecs");
        let rows = vec![vec![1, 2, 3], vec![9, 8, 7]];
        save_ivecs(&rows, &p).unwrap();
        assert_eq!(load_ivecs(&p).unwrap(), rows);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn pair() -> impl Strategy<Value = (Vec<f32>, Vec<f32>)> {
            (1usize..24).prop_flat_map(|d| {
                (
                    prop::collection::vec(-100.0f32..100.0, d),
                    prop::collection::vec(-100.0f32..100.0, d),
                )
            })
        }

        proptest! {
            #[test]
            fn symmetric_and_non_negative((a, b) in pair()) {
                for m in [Metric::Euclidean, Metric::Angular] {
                    let ab = distance(&a, &b, m).unwrap();
                    let ba = distance(&b, &a, m).unwrap();
                    prop_assert!(ab >= 0.0);
                    prop_assert!((ab - ba).abs() <= 1e-6 * ab.abs().max(1.0));
                }
            }

            #[test]
            fn topk_is_sorted_and_starts_at_minimum(
                rows in prop::collection::vec(prop::collection::vec(-5.0f32..5.0, 3), 1..60),
                q in prop::collection::vec(-5.0f32..5.0, 3),
                k in 1usize..10,
            ) {
                let store = VectorStore::from_rows(&rows, Metric::Euclidean).unwrap();
                let k = k.min(store.len());
                let top = brute_force_topk(&store, &q, k).unwrap();
                prop_assert!(top.windows(2).all(|w| w[0].distance <= w[1].distance));
                let min = store.iter().map(|r| distance_unchecked(r, &q, Metric::Euclidean)).fold(f32::INFINITY, f32::min);
                prop_assert_eq!(top[0].distance, min);
            }

            #[test]
            fn save_then_load_is_identity(rows in prop::collection::vec(prop::collection::vec(any::<f32>().prop_filter("finite", |x| x.is_finite()), 4), 0..20)) {
                let dir = tempfile::tempdir().unwrap();
                let p = dir.path().join("x.fvecs");
                let store = if rows.is_empty() { VectorStore::new(0, Metric::Euclidean) } else { VectorStore::from_rows(&rows, Metric::Euclidean).unwrap() };
                save_xvecs(&store, &p, ElementKind::F32).unwrap();
                let back = load_xvecs(&p, ElementKind::F32, Metric::Euclidean).unwrap();
                prop_assert_eq!(back.as_flat().iter().map(|x| x.to_bits()).collect::<Vec<_>>(), store.as_flat().iter().map(|x| x.to_bits()).collect::<Vec<_>>());
            }
        }
    }
}
