//! Offline build: partition, build one HNSW per partition and a meta-index
//! over the centroids, and lay everything out in a fresh fabric region.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fabric::{RegionHandle, RemoteMemory};
use crate::hnsw::{HnswIndex, HnswParams, SubImage};
use crate::layout::{build_layout, GapPolicy, GlobalMeta};
use crate::partition::{partition, PartitionParams, PartitionResult};
use crate::query::MetaIndex;
use crate::vector::VectorStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuildParams {
    pub partition: PartitionParams,
    pub sub_hnsw: HnswParams,
    pub meta_hnsw: HnswParams,
    pub gaps: GapPolicy,
}

impl Default for BuildParams {
    fn default() -> Self {
        Self {
            partition: PartitionParams::default(),
            sub_hnsw: HnswParams::with_m(16),
            meta_hnsw: HnswParams::with_m(8),
            gaps: GapPolicy::default(),
        }
    }
}

/// Wall-clock seconds per build phase.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BuildReport {
    pub t_partition: f64,
    pub t_sub: f64,
    pub t_meta_build: f64,
    pub t_layout: f64,
    pub total_image_bytes: u64,
}

#[derive(Debug, Clone)]
pub struct Deployment {
    pub region: RegionHandle,
    pub meta: GlobalMeta,
    pub partition: PartitionResult,
    pub report: BuildReport,
}

/// Per-partition stores and their global labels, in partition order.
pub fn split_by_partition(store: &VectorStore, labels: &[u64], assignment: &[u32], p: usize) -> Vec<(VectorStore, Vec<u64>)> {
    let mut members = vec![Vec::new(); p];
    for (i, &a) in assignment.iter().enumerate() {
        members[a as usize].push(i);
    }
    members
        .into_iter()
        .map(|ids| (store.select(&ids), ids.iter().map(|&i| labels[i]).collect()))
        .collect()
}

/// Builds one sub-index per partition, in parallel, deterministically.
pub fn build_subs(parts: &[(VectorStore, Vec<u64>)], params: &HnswParams) -> Result<Vec<HnswIndex>> {
    parts
        .par_iter()
        .map(|(s, l)| HnswIndex::build_with_labels(s, l, params.clone()))
        .collect()
}

/// Full offline build into a newly registered region. `labels` defaults to
/// row positions.
pub fn build_deployment(
    fabric: &dyn RemoteMemory,
    store: &VectorStore,
    labels: Option<&[u64]>,
    params: &BuildParams,
    epoch: u64,
) -> Result<Deployment> {
    if store.is_empty() {
        return Err(Error::invalid("cannot build over an empty store"));
    }
    let default_labels: Vec<u64>;
    let labels = match labels {
        Some(l) if l.len() == store.len() => l,
        Some(_) => return Err(Error::invalid("one label per vector required")),
        None => {
            default_labels = (0..store.len() as u64).collect();
            &default_labels
        }
    };
    let t0 = Instant::now();
    let part = partition(store, &params.partition)?;
    let t_partition = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let parts = split_by_partition(store, labels, &part.assignment, part.p());
    let subs = build_subs(&parts, &params.sub_hnsw)?;
    let images: Vec<SubImage> = subs.iter().map(|s| s.serialize(&params.gaps)).collect();
    let t_sub = t1.elapsed().as_secs_f64();

    let t2 = Instant::now();
    let meta_index = MetaIndex::build(&part.centroids, params.meta_hnsw.clone(), 0)?;
    let meta_image = meta_index.index.serialize(&GapPolicy::none());
    let t_meta_build = t2.elapsed().as_secs_f64();

    let t3 = Instant::now();
    let next_label = labels.iter().max().map_or(0, |m| m + 1);
    let (region, meta) = build_layout(fabric, &images, &meta_image, &params.gaps, epoch, next_label)?;
    let report = BuildReport {
        t_partition,
        t_sub,
        t_meta_build,
        t_layout: t3.elapsed().as_secs_f64(),
        total_image_bytes: images.iter().map(|i| i.len() as u64).sum(),
    };
    Ok(Deployment {
        region,
        meta,
        partition: part,
        report,
    })
}
