//! Analytical indexing and serving models.
//!
//! Every term is the stated complexity multiplied by one of two calibration
//! scalars: `per_dim_op` (seconds per scalar operation of a distance
//! computation, i.e. per `d`-dimensional term) and `per_byte_deser`
//! (seconds per deserialized byte). `log` is the natural logarithm.
//!
//! Indexing: `T_build = T_init + T_cluster + T_sub + T_meta_build` with
//! `T_init = κ·P·c_sample·P·d`, `T_cluster = κ·I_max·N·P·d`,
//! `T_sub = κ·⌈P / n_threads⌉·(N/P)·log(N/P)·e_build·d` and
//! `T_meta_build = κ·(N·d + P·log P·e_build·d)`. With
//! `include_assignment_terms` the clustering estimate also keeps the heap and
//! global-queue terms `I_max·(N·P·log L + N·log N)` usually dropped on the
//! grounds that `P·d` dominates `log N`.
//!
//! Serving: `T_meta = κ·(B / n_threads)·d·e_meta·log P`,
//! `T_net = P_fetch·(S / W_net + net_latency)`, `T_deser = δ·P_fetch·S`,
//! `T_comp = κ·M·d·e_sub·log(N/P)`, and
//! `T_pipeline = max{T_net, T_deser, T_comp} + t_fetch + 2·t_deser + t_search`
//! with per-task means `t_x = T_x / P_fetch`. `net_latency = 0` is the
//! bandwidth-only network term; a positive value adds the per-fetch round
//! trip the simulator charges.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Calibration {
    pub per_dim_op: f64,
    pub per_byte_deser: f64,
}

impl Default for Calibration {
    fn default() -> Self {
        Self {
            per_dim_op: 5e-10,
            per_byte_deser: 1e-10,
        }
    }
}

/// Every symbol the models use.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelParams {
    pub n: usize,
    pub d: usize,
    pub p: usize,
    pub k: usize,
    pub e_build: usize,
    pub e_meta: usize,
    pub e_sub: usize,
    /// Batch size.
    pub b: usize,
    /// Average serialized sub-index size in bytes.
    pub s: f64,
    pub p_fetch: usize,
    /// Network bandwidth in bytes per second.
    pub w_net: f64,
    pub n_threads: usize,
    pub i_max: usize,
    pub c_sample: usize,
    pub l: usize,
    /// Routed partitions per query; `M = B·R` unless `pairs` is given.
    pub r: usize,
    pub pairs: Option<usize>,
    /// Fixed seconds per fetch on top of its transfer time.
    pub net_latency: f64,
    pub include_assignment_terms: bool,
    pub calibration: Calibration,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            n: 10_000,
            d: 32,
            p: 20,
            k: 10,
            e_build: 100,
            e_meta: 32,
            e_sub: 96,
            b: 256,
            s: 0.0,
            p_fetch: 4,
            w_net: 12.5e9,
            n_threads: 1,
            i_max: 20,
            c_sample: 8,
            l: 3,
            r: 4,
            pairs: None,
            net_latency: 0.0,
            include_assignment_terms: false,
            calibration: Calibration::default(),
        }
    }
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.n, self.d, self.p, self.k, self.e_build, self.e_meta, self.e_sub, self.b, self.n_threads, self.i_max,
            self.c_sample, self.l, self.r,
        ];
        if counts.contains(&0) {
            return Err(Error::invalid("model counts must be positive"));
        }
        if self.p_fetch > self.p {
            return Err(Error::invalid("P_fetch cannot exceed P"));
        }
        let c = &self.calibration;
        let nonneg = [self.s, self.net_latency, c.per_dim_op, c.per_byte_deser];
        if nonneg.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || !(self.w_net > 0.0) {
            return Err(Error::invalid("model sizes, rates and constants must be finite and non-negative"));
        }
        Ok(())
    }

    /// `(sub-index, query)` pairs searched.
    pub fn m(&self) -> usize {
        self.pairs.unwrap_or(self.b * self.r)
    }

    fn per_part(&self) -> f64 {
        self.n as f64 / self.p as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct BuildPrediction {
    pub t_init: f64,
    pub t_cluster: f64,
    pub t_sub: f64,
    pub t_meta_build: f64,
    pub t_build: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct BatchPrediction {
    pub t_meta: f64,
    pub t_net: f64,
    pub t_deser: f64,
    pub t_comp: f64,
    pub t_pipeline: f64,
    pub t: f64,
}

impl BatchPrediction {
    pub fn max_stage(&self) -> f64 {
        self.t_net.max(self.t_deser).max(self.t_comp)
    }

    pub fn stage_sum(&self) -> f64 {
        self.t_net + self.t_deser + self.t_comp
    }
}

/// `log` that is 0 at and below 1, so single-element terms vanish.
fn ln(x: f64) -> f64 {
    if x > 1.0 {
        x.ln()
    } else {
        0.0
    }
}

pub fn predict_build(p: &ModelParams) -> Result<BuildPrediction> {
    p.validate()?;
    let k = p.calibration.per_dim_op;
    let (n, d, parts) = (p.n as f64, p.d as f64, p.p as f64);
    let t_init = k * parts * p.c_sample as f64 * parts * d;
    let mut t_cluster = k * p.i_max as f64 * n * parts * d;
    if p.include_assignment_terms {
        t_cluster += k * p.i_max as f64 * (n * parts * ln(p.l as f64) + n * ln(n));
    }
    let rounds = p.p.div_ceil(p.n_threads) as f64;
    let t_sub = k * rounds * p.per_part() * ln(p.per_part()) * p.e_build as f64 * d;
    let t_meta_build = k * (n * d + parts * ln(parts) * p.e_build as f64 * d);
    Ok(BuildPrediction {
        t_init,
        t_cluster,
        t_sub,
        t_meta_build,
        t_build: t_init + t_cluster + t_sub + t_meta_build,
    })
}

pub fn predict_batch(p: &ModelParams) -> Result<BatchPrediction> {
    p.validate()?;
    let c = &p.calibration;
    let d = p.d as f64;
    let t_meta = c.per_dim_op * (p.b as f64 / p.n_threads as f64) * d * p.e_meta as f64 * ln(p.p as f64);
    let pf = p.p_fetch as f64;
    let t_net = pf * (p.s / p.w_net + p.net_latency);
    let t_deser = c.per_byte_deser * pf * p.s;
    let t_comp = c.per_dim_op * p.m() as f64 * d * p.e_sub as f64 * ln(p.per_part());
    let t_pipeline = if p.p_fetch == 0 {
        t_comp
    } else {
        t_net.max(t_deser).max(t_comp) + (t_net + 2.0 * t_deser + t_comp) / pf
    };
    Ok(BatchPrediction {
        t_meta,
        t_net,
        t_deser,
        t_comp,
        t_pipeline,
        t: t_meta + t_pipeline,
    })
}

/// Fits `per_dim_op` so the clustering term matches one measured time.
pub fn calibrate_cluster(p: &ModelParams, measured_t_cluster: f64) -> Result<Calibration> {
    let unit = predict_build(&ModelParams {
        calibration: Calibration {
            per_dim_op: 1.0,
            ..p.calibration
        },
        ..*p
    })?
    .t_cluster;
    if !(unit > 0.0) {
        return Err(Error::invalid("clustering term is zero; cannot calibrate"));
    }
    Ok(Calibration {
        per_dim_op: measured_t_cluster / unit,
        ..p.calibration
    })
}

/// Fits both constants from one measured batch: `per_dim_op` from its
/// search time and `per_byte_deser` from its deserialize time.
pub fn calibrate_batch(p: &ModelParams, measured_t_comp: f64, measured_t_deser: f64) -> Result<Calibration> {
    let unit = predict_batch(&ModelParams {
        calibration: Calibration {
            per_dim_op: 1.0,
            per_byte_deser: 1.0,
        },
        ..*p
    })?;
    if !(unit.t_comp > 0.0 && unit.t_deser > 0.0) {
        return Err(Error::invalid("search or deserialize term is zero; cannot calibrate"));
    }
    Ok(Calibration {
        per_dim_op: measured_t_comp / unit.t_comp,
        per_byte_deser: measured_t_deser / unit.t_deser,
    })
}

/// `|predicted - measured| / measured`.
pub fn relative_error(predicted: f64, measured: f64) -> f64 {
    (predicted - measured).abs() / measured.abs().max(f64::MIN_POSITIVE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn doubling_n_doubles_clustering() {
        let p = ModelParams::default();
        let a = predict_build(&p).unwrap();
        let b = predict_build(&ModelParams { n: 2 * p.n, ..p }).unwrap();
        assert!((b.t_cluster - 2.0 * a.t_cluster).abs() <= 1e-12 * b.t_cluster);
        assert!((a.t_build - (a.t_init + a.t_cluster + a.t_sub + a.t_meta_build)).abs() < 1e-15);
    }

    #[test]
    fn single_partition_init_is_negligible() {
        let b = predict_build(&ModelParams {
            p: 1,
            p_fetch: 1,
            n: 1_000_000,
            ..Default::default()
        })
        .unwrap();
        assert!(b.t_init < 1e-3 * b.t_cluster);
    }

    #[test]
    fn equal_stage_times_give_n_plus_four() {
        // Per-task fetch = deser = search = t.
        let t = 1e-3;
        let base = ModelParams {
            p: 64,
            p_fetch: 10,
            s: 1e6,
            w_net: 1e6 / t,
            pairs: Some(1),
            ..Default::default()
        };
        let unit = predict_batch(&ModelParams {
            calibration: Calibration {
                per_dim_op: 1.0,
                per_byte_deser: 1.0,
            },
            ..base
        })
        .unwrap();
        let p = ModelParams {
            calibration: Calibration {
                per_dim_op: 10.0 * t / unit.t_comp,
                per_byte_deser: t / 1e6,
            },
            ..base
        };
        let r = predict_batch(&p).unwrap();
        assert!((r.t_pipeline - 14.0 * t).abs() < 1e-12, "{}", r.t_pipeline);
        assert!((r.t - r.t_meta - r.t_pipeline).abs() < 1e-15);
    }

    #[test]
    fn dominant_network_approaches_the_bound() {
        let ratio = |pf: usize| {
            let r = predict_batch(&ModelParams {
                p: 100_000,
                p_fetch: pf,
                s: 1e6,
                w_net: 1e6,
                ..Default::default()
            })
            .unwrap();
            r.t_pipeline / r.t_net
        };
        assert!(ratio(10) > ratio(1000) && ratio(100_000) < 1.0001);
    }

    #[test]
    fn calibration_recovers_constants() {
        let truth = Calibration {
            per_dim_op: 3e-9,
            per_byte_deser: 7e-11,
        };
        let p = ModelParams {
            s: 2e5,
            calibration: truth,
            ..Default::default()
        };
        let r = predict_batch(&p).unwrap();
        let fit = calibrate_batch(&ModelParams { calibration: Calibration::default(), ..p }, r.t_comp, r.t_deser).unwrap();
        assert!(relative_error(fit.per_dim_op, truth.per_dim_op) < 1e-12);
        assert!(relative_error(fit.per_byte_deser, truth.per_byte_deser) < 1e-12);
        let b = predict_build(&p).unwrap();
        let fit = calibrate_cluster(&ModelParams { calibration: Calibration::default(), ..p }, b.t_cluster).unwrap();
        assert!(relative_error(fit.per_dim_op, truth.per_dim_op) < 1e-12);
    }

    #[test]
    fn invalid_params_are_rejected() {
        assert!(predict_batch(&ModelParams { p_fetch: 30, ..Default::default() }).is_err());
        assert!(predict_build(&ModelParams { n: 0, ..Default::default() }).is_err());
    }

    proptest! {
        #[test]
        fn pipeline_bounds_and_monotonicity(
            pf in 1usize..64,
            s in 1e3f64..1e7,
            w in 1e8f64..1e11,
            b in 1usize..512,
            e in 8usize..256,
            bump in 1usize..8,
        ) {
            let p = ModelParams { p: 64, p_fetch: pf, s, w_net: w, b, e_sub: e, ..Default::default() };
            let r = predict_batch(&p).unwrap();
            prop_assert!(r.t_pipeline >= r.max_stage());
            // The stage-sum bound holds when no stage is below half the
            // bottleneck and P_fetch >= 4.
            let min = r.t_net.min(r.t_deser).min(r.t_comp);
            if pf >= 4 && min >= r.max_stage() / 2.0 {
                prop_assert!(r.t_pipeline <= r.stage_sum() * (1.0 + 1e-12));
            }
            // More fetched subs spread a fixed M over more tasks, so the
            // drain term t_search can shrink: only the stages are monotone.
            let r2 = predict_batch(&ModelParams { p_fetch: (pf + bump).min(64), ..p }).unwrap();
            prop_assert!(r2.t_net >= r.t_net && r2.t_deser >= r.t_deser && r2.t_comp >= r.t_comp);
            for q in [
                ModelParams { s: s * 2.0, ..p },
                ModelParams { b: b + bump, ..p },
                ModelParams { e_sub: e + bump, ..p },
                ModelParams { n: p.n * 2, ..p },
            ] {
                let r2 = predict_batch(&q).unwrap();
                prop_assert!(r2.t_net >= r.t_net && r2.t_deser >= r.t_deser && r2.t_comp >= r.t_comp);
                prop_assert!(r2.t >= r.t * (1.0 - 1e-12));
            }
            let bb = predict_build(&p).unwrap();
            let bb2 = predict_build(&ModelParams { n: p.n * 2, ..p }).unwrap();
            prop_assert!(bb2.t_build >= bb.t_build);
        }
    }
}
