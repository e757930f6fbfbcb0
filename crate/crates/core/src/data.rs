//! Synthetic workloads and exact ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vector::{Metric, Neighbor, VectorStore};

/// Isotropic Gaussian mixture with centers drawn uniformly from `[-1, 1]^d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixtureSpec {
    pub dim: usize,
    pub components: usize,
    /// Per-coordinate standard deviation around each center.
    pub spread: f32,
    pub seed: u64,
}

impl Default for MixtureSpec {
    fn default() -> Self {
        Self {
            dim: 32,
            components: 40,
            spread: 0.1,
            seed: 7,
        }
    }
}

/// A fixed mixture from which any number of points can be drawn.
#[derive(Debug, Clone)]
pub struct Mixture {
    spec: MixtureSpec,
    centers: Vec<Vec<f32>>,
}

impl Mixture {
    pub fn new(spec: MixtureSpec) -> Result<Self> {
        if spec.dim == 0 || spec.components == 0 {
            return Err(Error::invalid("mixture needs a positive dimension and component count"));
        }
        if !(spec.spread.is_finite() && spec.spread >= 0.0) {
            return Err(Error::invalid("spread must be finite and non-negative"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let u = Uniform::new_inclusive(-1.0f32, 1.0).expect("valid range");
        let centers = (0..spec.components)
            .map(|_| (0..spec.dim).map(|_| u.sample(&mut rng)).collect())
            .collect();
        Ok(Self { spec, centers })
    }

    pub fn spec(&self) -> &MixtureSpec {
        &self.spec
    }

    pub fn centers(&self) -> &[Vec<f32>] {
        &self.centers
    }

    /// One point from component `c`.
    pub fn sample_from(&self, c: usize, rng: &mut impl Rng) -> Vec<f32> {
        let normal = Normal::new(0.0f32, self.spec.spread.max(f32::MIN_POSITIVE)).expect("valid sigma");
        self.centers[c % self.centers.len()]
            .iter()
            .map(|&x| x + if self.spec.spread == 0.0 { 0.0 } else { normal.sample(rng) })
            .collect()
    }

    /// `n` points with uniformly chosen components, reproducible from `seed`.
    pub fn sample(&self, n: usize, seed: u64, metric: Metric) -> VectorStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut flat = Vec::with_capacity(n * self.spec.dim);
        for _ in 0..n {
            let c = rng.random_range(0..self.centers.len());
            flat.extend(self.sample_from(c, &mut rng));
        }
        finish(self.spec.dim, flat, metric)
    }

    /// `n` points drawn only from components `hot` (a locality workload).
    pub fn sample_hot(&self, n: usize, hot: &[usize], seed: u64, metric: Metric) -> VectorStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut flat = Vec::with_capacity(n * self.spec.dim);
        for _ in 0..n {
            let c = hot[rng.random_range(0..hot.len())];
            flat.extend(self.sample_from(c, &mut rng));
        }
        finish(self.spec.dim, flat, metric)
    }
}

fn finish(dim: usize, flat: Vec<f32>, metric: Metric) -> VectorStore {
    let mut s = VectorStore::from_flat(dim, flat, metric).expect("consistent length");
    if metric == Metric::Angular {
        s.normalize();
    }
    s
}

/// Exact top-`k` of every query against `base` (labels default to rows).
pub fn ground_truth(base: &VectorStore, labels: Option<&[u64]>, queries: &VectorStore, k: usize) -> Result<Vec<Vec<Neighbor>>> {
    if base.dim() != queries.dim() {
        return Err(Error::DimensionMismatch {
            expected: base.dim(),
            got: queries.dim(),
        });
    }
    if let Some(l) = labels {
        if l.len() != base.len() {
            return Err(Error::invalid("one label per base vector required"));
        }
    }
    Ok((0..queries.len())
        .into_par_iter()
        .map(|qi| {
            let q = queries.get(qi);
            let mut all: Vec<Neighbor> = (0..base.len())
                .map(|i| Neighbor::new(labels.map_or(i as u64, |l| l[i]), base.distance_to(i, q)))
                .collect();
            let k = k.min(all.len());
            if k < all.len() {
                all.select_nth_unstable(k);
                all.truncate(k);
            }
            all.sort();
            all
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampling_is_reproducible() {
        let m = Mixture::new(MixtureSpec::default()).unwrap();
        let a = m.sample(50, 3, Metric::Euclidean);
        assert_eq!(a, m.sample(50, 3, Metric::Euclidean));
        assert_ne!(a, m.sample(50, 4, Metric::Euclidean));
        let n = m.sample(10, 3, Metric::Angular);
        for v in n.iter() {
            let norm: f32 = v.iter().map(|x| x * x).sum::<f32>().sqrt();
            assert!((norm - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn ground_truth_is_sorted_and_exact() {
        let base = VectorStore::from_rows(&[[0.0f32], [3.0], [1.0], [2.0]], Metric::Euclidean).unwrap();
        let q = VectorStore::from_rows(&[[0.9f32]], Metric::Euclidean).unwrap();
        let gt = ground_truth(&base, Some(&[10, 11, 12, 13]), &q, 2).unwrap();
        assert_eq!(gt[0].iter().map(|n| n.id).collect::<Vec<_>>(), vec![12, 10]);
    }
}
