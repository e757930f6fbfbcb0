//! Build a deployment in simulated remote memory, query it, insert into it.
//!
//!     cargo run --release -p remann --example quickstart

use std::sync::Arc;

use remann::build::{build_deployment, BuildParams};
use remann::data::{Mixture, MixtureSpec};
use remann::fabric::{CostModel, Fabric};
use remann::insert::{InsertCoordinator, InsertParams};
use remann::query::{EngineParams, QueryBatch, QueryEngine};
use remann::vector::Metric;

fn main() -> remann::Result<()> {
    let mix = Mixture::new(MixtureSpec {
        dim: 32,
        components: 40,
        spread: 0.1,
        seed: 1,
    })?;
    let base = mix.sample(10_000, 2, Metric::Euclidean);
    let queries = mix.sample(256, 3, Metric::Euclidean);

    let fabric = Arc::new(Fabric::new(CostModel::default()));
    let mut params = BuildParams::default();
    params.sub_hnsw.heuristic = true;
    let dep = build_deployment(fabric.as_ref(), &base, None, &params, 0)?;
    println!("built {} partitions into a {}-byte region", dep.meta.subs.len(), dep.region.size);

    let mut engine = QueryEngine::connect(fabric.clone(), dep.region.id, EngineParams::default())?;
    let out = engine.run_batch(&QueryBatch::new(queries.clone(), 10, 4))?;
    println!(
        "query 0 nearest: {:?}; simulated batch latency {:.1} us",
        out.results[0].neighbors.first(),
        (out.metrics.t_meta + out.metrics.t_pipeline) * 1e6
    );

    let mut writer = InsertCoordinator::connect(fabric.clone(), dep.region.id, InsertParams::default())?;
    let inserted = writer.insert_batch(&mix.sample(100, 4, Metric::Euclidean))?;
    println!("inserted {} vectors", inserted.statuses.len());

    let again = engine.run_batch(&QueryBatch::new(queries, 10, 4))?;
    println!("re-query sees {} results", again.results.len());
    Ok(())
}
