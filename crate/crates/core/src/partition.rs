//! Balanced, capacity-constrained clustering.
//!
//! [`partition`] seeds centers with sampled k-means++ ([`kmeanspp_init`]),
//! then alternates capacity-constrained assignment ([`balanced_assign`]) and
//! centroid recomputation for a fixed number of iterations. No partition ever
//! holds more than `ceil(N / P)` vectors.
//!
//! Assignment order: vectors are taken by descending regret, the gap between
//! the distance to their second- and first-choice centroid, so the vectors
//! that lose the most by being displaced choose first. Ties go to the smaller
//! vector id. From the second iteration on, the previous assignment is kept
//! when the greedy pass would score worse against the new centroids, which
//! makes the objective non-increasing (exactly so for squared Euclidean).

use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vector::{distance_unchecked, normalize_in_place, save_ivecs, save_xvecs, ElementKind, Metric, VectorStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PartitionParams {
    pub p: usize,
    pub i_max: usize,
    pub l: usize,
    pub c_sample: usize,
    pub rng_seed: u64,
}

impl Default for PartitionParams {
    fn default() -> Self {
        Self {
            p: 20,
            i_max: 20,
            l: 3,
            c_sample: 8,
            rng_seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionResult {
    pub assignment: Vec<u32>,
    pub centroids: VectorStore,
    pub sizes: Vec<usize>,
    /// Sum of member-to-centroid distances after each iteration's assignment.
    pub objective_history: Vec<f64>,
}

impl PartitionResult {
    pub fn p(&self) -> usize {
        self.sizes.len()
    }

    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut m = vec![Vec::new(); self.p()];
        for (i, &a) in self.assignment.iter().enumerate() {
            m[a as usize].push(i);
        }
        m
    }

    /// Standard deviation of partition sizes divided by their mean.
    pub fn normalized_size_std(&self) -> f64 {
        normalized_std(&self.sizes)
    }

    /// Writes the assignment as a one-column ivecs file and the centroids as fvecs.
    pub fn export(&self, assignment_path: impl AsRef<Path>, centroid_path: impl AsRef<Path>) -> Result<()> {
        let rows: Vec<[i32; 1]> = self.assignment.iter().map(|&a| [a as i32]).collect();
        save_ivecs(&rows, assignment_path)?;
        save_xvecs(&self.centroids, centroid_path, ElementKind::F32)
    }
}

pub fn normalized_std(sizes: &[usize]) -> f64 {
    let n = sizes.len() as f64;
    let mean = sizes.iter().sum::<usize>() as f64 / n;
    if mean == 0.0 {
        return 0.0;
    }
    let var = sizes.iter().map(|&s| (s as f64 - mean).powi(2)).sum::<f64>() / n;
    var.sqrt() / mean
}

/// Sampled k-means++ seeding: the first center is uniform; each later center
/// is the best of `c_sample` uniformly drawn unchosen vectors, scored by
/// distance to the nearest chosen center. Returns the chosen vector ids.
pub fn kmeanspp_init(store: &VectorStore, p: usize, c_sample: usize, rng_seed: u64) -> Result<Vec<usize>> {
    let n = store.len();
    if p == 0 || p > n {
        return Err(Error::invalid(format!("need 1 <= P <= N, got P = {p}, N = {n}")));
    }
    if c_sample == 0 {
        return Err(Error::invalid("c_sample must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut remaining: Vec<usize> = (0..n).collect();
    let first = rng.random_range(0..n);
    remaining.swap_remove(first);
    let mut chosen = vec![first];
    while chosen.len() < p {
        let take = c_sample.min(remaining.len());
        let picks = sample(&mut rng, remaining.len(), take);
        let mut best: Option<(f32, usize)> = None;
        for pos in picks.iter() {
            let cand = remaining[pos];
            let v = store.get(cand);
            let d = chosen
                .iter()
                .map(|&c| distance_unchecked(v, store.get(c), store.metric()))
                .fold(f32::INFINITY, f32::min);
            // Larger distance wins; ties go to the smaller vector id.
            let better = match best {
                None => true,
                Some((bd, bc)) => d > bd || (d == bd && cand < remaining[bc]),
            };
            if better {
                best = Some((d, pos));
            }
        }
        let (_, pos) = best.expect("at least one candidate");
        chosen.push(remaining.swap_remove(pos));
    }
    Ok(chosen)
}

/// All vector-to-centroid distances, row-major `N x P`.
pub fn distance_matrix(store: &VectorStore, centroids: &VectorStore) -> Vec<f32> {
    let p = centroids.len();
    let metric = store.metric();
    let mut out = vec![0f32; store.len() * p];
    out.par_chunks_mut(p.max(1)).enumerate().for_each(|(i, row)| {
        let v = store.get(i);
        for (j, slot) in row.iter_mut().enumerate() {
            *slot = distance_unchecked(v, centroids.get(j), metric);
        }
    });
    out
}

fn by_distance(row: &[f32], a: usize, b: usize) -> std::cmp::Ordering {
    row[a].total_cmp(&row[b]).then(a.cmp(&b))
}

/// Capacity-constrained assignment given precomputed distances (`N x P`).
pub fn balanced_assign_with(dists: &[f32], n: usize, p: usize, l: usize, cap: usize) -> Result<Vec<u32>> {
    if p == 0 || dists.len() != n * p {
        return Err(Error::invalid("distance matrix must be N x P with P > 0"));
    }
    if cap.checked_mul(p).is_none_or(|c| c < n) {
        return Err(Error::invalid(format!("capacity {cap} x {p} partitions cannot hold {n} vectors")));
    }
    let l = l.clamp(1, p);
    let prefs: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let row = &dists[i * p..(i + 1) * p];
            let mut idx: Vec<usize> = (0..p).collect();
            if l < p {
                idx.select_nth_unstable_by(l - 1, |&a, &b| by_distance(row, a, b));
                idx.truncate(l);
            }
            idx.sort_by(|&a, &b| by_distance(row, a, b));
            idx
        })
        .collect();
    let regret = |i: usize| -> f32 {
        let row = &dists[i * p..(i + 1) * p];
        match prefs[i].as_slice() {
            [a, b, ..] => row[*b] - row[*a],
            _ => f32::INFINITY,
        }
    };
    let mut order: Vec<usize> = (0..n).collect();
    let regrets: Vec<f32> = (0..n).map(regret).collect();
    order.sort_by(|&a, &b| regrets[b].total_cmp(&regrets[a]).then(a.cmp(&b)));
    let mut sizes = vec![0usize; p];
    let mut assignment = vec![0u32; n];
    for i in order {
        let choice = prefs[i].iter().copied().find(|&c| sizes[c] < cap).unwrap_or_else(|| {
            let row = &dists[i * p..(i + 1) * p];
            (0..p)
                .filter(|&c| sizes[c] < cap)
                .min_by(|&a, &b| by_distance(row, a, b))
                .expect("capacity check guarantees a free partition")
        });
        sizes[choice] += 1;
        assignment[i] = choice as u32;
    }
    Ok(assignment)
}

pub fn balanced_assign(store: &VectorStore, centroids: &VectorStore, l: usize, cap: usize) -> Result<Vec<u32>> {
    if centroids.dim() != store.dim() {
        return Err(Error::DimensionMismatch {
            expected: store.dim(),
            got: centroids.dim(),
        });
    }
    let d = distance_matrix(store, centroids);
    balanced_assign_with(&d, store.len(), centroids.len(), l, cap)
}

fn sizes_of(assignment: &[u32], p: usize) -> Vec<usize> {
    let mut s = vec![0usize; p];
    for &a in assignment {
        s[a as usize] += 1;
    }
    s
}

fn recompute_centroids(store: &VectorStore, assignment: &[u32], old: &VectorStore) -> VectorStore {
    let (p, d) = (old.len(), store.dim());
    let mut sums = vec![0f64; p * d];
    let mut counts = vec![0usize; p];
    for (i, &a) in assignment.iter().enumerate() {
        let a = a as usize;
        counts[a] += 1;
        for (s, &x) in sums[a * d..(a + 1) * d].iter_mut().zip(store.get(i)) {
            *s += x as f64;
        }
    }
    let mut data = Vec::with_capacity(p * d);
    for j in 0..p {
        if counts[j] == 0 {
            data.extend_from_slice(old.get(j));
            continue;
        }
        let mut row: Vec<f32> = sums[j * d..(j + 1) * d].iter().map(|&s| (s / counts[j] as f64) as f32).collect();
        if store.metric() == Metric::Angular {
            normalize_in_place(&mut row);
        }
        data.extend(row);
    }
    VectorStore::from_flat(d, data, store.metric()).expect("centroid shape")
}

/// Moves the farthest member of the largest partition into each empty one
/// and reseeds that partition's centroid on it.
fn repair_empty(store: &VectorStore, assignment: &mut [u32], centroids: &mut VectorStore) {
    let p = centroids.len();
    let d = store.dim();
    loop {
        let sizes = sizes_of(assignment, p);
        let Some(empty) = sizes.iter().position(|&s| s == 0) else { break };
        let largest = (0..p).max_by(|&a, &b| sizes[a].cmp(&sizes[b]).then(b.cmp(&a))).unwrap();
        if sizes[largest] <= 1 {
            break;
        }
        let c = centroids.get(largest).to_vec();
        let far = (0..store.len())
            .filter(|&i| assignment[i] as usize == largest)
            .max_by(|&a, &b| {
                store
                    .distance_to(a, &c)
                    .total_cmp(&store.distance_to(b, &c))
                    .then(b.cmp(&a))
            })
            .unwrap();
        assignment[far] = empty as u32;
        let mut data = centroids.as_flat().to_vec();
        data[empty * d..(empty + 1) * d].copy_from_slice(store.get(far));
        *centroids = VectorStore::from_flat(d, data, store.metric()).unwrap();
    }
}

fn objective(dists: &[f32], assignment: &[u32], p: usize) -> f64 {
    assignment
        .iter()
        .enumerate()
        .map(|(i, &a)| dists[i * p + a as usize] as f64)
        .sum()
}

fn run_lloyd(store: &VectorStore, params: &PartitionParams, balanced: bool) -> Result<PartitionResult> {
    let n = store.len();
    let p = params.p;
    let seeds = kmeanspp_init(store, p, params.c_sample, params.rng_seed)?;
    let mut centroids = store.select(&seeds);
    let cap = n.div_ceil(p);
    let mut assignment = vec![0u32; n];
    let mut history = Vec::with_capacity(params.i_max);
    for _ in 0..params.i_max.max(1) {
        let dists = distance_matrix(store, &centroids);
        assignment = if balanced {
            let greedy = balanced_assign_with(&dists, n, p, params.l, cap)?;
            // The greedy pass is not a descent step; keep the previous
            // (equally feasible) assignment when it scores better, so the
            // objective never increases between iterations.
            if !history.is_empty() && objective(&dists, &assignment, p) < objective(&dists, &greedy, p) {
                assignment
            } else {
                greedy
            }
        } else {
            (0..n)
                .map(|i| {
                    let row = &dists[i * p..(i + 1) * p];
                    (0..p).min_by(|&a, &b| by_distance(row, a, b)).unwrap() as u32
                })
                .collect()
        };
        history.push(objective(&dists, &assignment, p));
        centroids = recompute_centroids(store, &assignment, &centroids);
        repair_empty(store, &mut assignment, &mut centroids);
    }
    let sizes = sizes_of(&assignment, p);
    Ok(PartitionResult {
        centroids: recompute_centroids(store, &assignment, &centroids),
        assignment,
        sizes,
        objective_history: history,
    })
}

/// Balanced clustering into `params.p` partitions of at most `ceil(N/P)`.
pub fn partition(store: &VectorStore, params: &PartitionParams) -> Result<PartitionResult> {
    if params.l == 0 {
        return Err(Error::invalid("L must be positive"));
    }
    run_lloyd(store, params, true)
}

/// Plain Lloyd k-means with the same seeding; the unbalanced comparison point.
pub fn kmeans_unconstrained(store: &VectorStore, params: &PartitionParams) -> Result<PartitionResult> {
    run_lloyd(store, params, false)
}

/// Assigns vector `i` to partition `i mod P`; a quality floor for tests.
pub fn round_robin(n: usize, p: usize) -> Vec<u32> {
    (0..n).map(|i| (i % p) as u32).collect()
}

/// Sum of squared-distance-to-centroid over members, centroids recomputed
/// from the assignment.
pub fn intra_cluster_cost(store: &VectorStore, assignment: &[u32], p: usize) -> f64 {
    let zero = VectorStore::from_flat(store.dim(), vec![0.0; p * store.dim()], store.metric()).unwrap();
    let c = recompute_centroids(store, assignment, &zero);
    assignment
        .iter()
        .enumerate()
        .map(|(i, &a)| store.distance_to(i, c.get(a as usize)) as f64)
        .sum()
}
