//! `remann` — build, query and benchmark partitioned HNSW deployments over a
//! simulated remote-memory fabric.
//!
//! Every verb reads one TOML config (all keys optional; `remann config`
//! prints the defaults) and writes CSV/JSON files under `output_dir`. A
//! JSON summary goes to stdout. The `REMANN_COST_MODEL` environment variable
//! overrides cost-model terms, e.g. `rtt=2e-6,bandwidth=25e9`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use remann::bench::{self, BenchConfig};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "remann", version, about = "Partitioned HNSW search over simulated one-sided remote memory")]
struct Cli {
    /// Config file (TOML). Without it the documented defaults are used.
    #[arg(short, long, global = true, env = "REMANN_CONFIG")]
    config: Option<PathBuf>,
    /// Overrides `output_dir` from the config.
    #[arg(short, long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective configuration as TOML.
    Config,
    /// Partition, build and lay out the dataset; persist region + sidecar.
    Build,
    /// Run the query set against the persisted deployment.
    Query,
    /// Sweep the per-worker cache ratio.
    CacheSweep {
        /// Cache ratios to sweep, as fractions of P.
        #[arg(long, value_delimiter = ',', default_value = "0,0.05,0.1,0.15,0.2")]
        ratios: Vec<f64>,
    },
    /// Insert the configured pool into the persisted deployment.
    Insert,
    /// Batch latency against insert ratio, plus a rebuild throughput trace.
    Mixed,
    /// Scripted schedule that exhausts overflow, rebuilds and audits.
    RebuildDemo,
    /// Cost-model predictions next to a simulated batch and build timings.
    Model,
    /// Per-sub layout table of the persisted deployment.
    InspectLayout,
}

fn print<T: Serialize>(v: &T) -> remann::Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cli: Cli) -> remann::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => BenchConfig::load(p)?,
        None => BenchConfig::from_toml("")?,
    };
    if let Some(out) = cli.out {
        cfg.output_dir = out;
    }
    match cli.command {
        Command::Config => {
            print!("{}", cfg.to_toml()?);
            Ok(())
        }
        Command::Build => print(&bench::cmd_build(&cfg)?),
        Command::Query => {
            let s = bench::cmd_query(&cfg)?;
            for w in &s.warnings {
                eprintln!("warning: {w}");
            }
            print(&s)
        }
        Command::CacheSweep { ratios } => print(&bench::cmd_cache_sweep(&cfg, &ratios)?),
        Command::Insert => print(&bench::cmd_insert(&cfg)?),
        Command::Mixed => print(&bench::cmd_mixed(&cfg)?),
        Command::RebuildDemo => print(&bench::cmd_rebuild_demo(&cfg)?),
        Command::Model => print(&bench::cmd_model(&cfg)?),
        Command::InspectLayout => {
            let (meta, rows) = bench::cmd_inspect_layout(&cfg)?;
            #[derive(Serialize)]
            struct Out<'a> {
                epoch: u64,
                next_label: u64,
                rebuild_requested: bool,
                region_len: u64,
                subs: &'a [bench::LayoutRow],
            }
            print(&Out {
                epoch: meta.epoch,
                next_label: meta.next_label,
                rebuild_requested: meta.rebuild_requested,
                region_len: meta.region_len,
                subs: &rows,
            })
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
