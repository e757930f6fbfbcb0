//! Simulated one-sided remote memory.
//!
//! A [`Fabric`] owns registered byte regions and applies READ, WRITE and
//! doorbell-batched operations to them without any "remote CPU" logic. Every
//! operation is charged against a deterministic [`CostModel`]:
//!
//! * `read(len)` / `write(len)`: `rtt + len / bandwidth`
//! * `doorbell(ops)`: `rtt + sum(len) / bandwidth + per_op_overhead * ops.len()`
//!
//! Charged time is accumulated, not slept, unless `real_sleep` is set.
//! A doorbell batch either applies completely, in list order, or not at all.

pub mod wire;

use std::collections::HashMap;
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::sync::{Mutex, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const COST_MODEL_ENV: &str = "REMANN_COST_MODEL";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostModel {
    /// Seconds per network round trip.
    pub rtt: f64,
    /// Bytes per second.
    pub bandwidth: f64,
    /// Seconds per posted work element inside a doorbell batch.
    pub per_op_overhead: f64,
    pub max_batch: usize,
    pub real_sleep: bool,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            rtt: 5e-6,
            bandwidth: 100e9 / 8.0,
            per_op_overhead: 0.2e-6,
            max_batch: 16,
            real_sleep: false,
        }
    }
}

impl CostModel {
    pub fn transfer_cost(&self, len: u64) -> f64 {
        self.rtt + len as f64 / self.bandwidth
    }

    pub fn doorbell_cost(&self, total_len: u64, n_ops: usize) -> f64 {
        self.rtt + total_len as f64 / self.bandwidth + self.per_op_overhead * n_ops as f64
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |x: f64| x.is_finite() && x >= 0.0;
        if !ok(self.rtt) || !ok(self.per_op_overhead) || !(self.bandwidth > 0.0) || !self.bandwidth.is_finite() {
            return Err(Error::Config("cost model terms must be non-negative with positive bandwidth".into()));
        }
        if self.max_batch == 0 {
            return Err(Error::Config("max_batch must be positive".into()));
        }
        Ok(())
    }

    /// Applies `key=value` overrides separated by commas, e.g.
    /// `rtt=2e-6,bandwidth=25e9,per_op=1e-7,max_batch=32`.
    pub fn with_overrides(mut self, spec: &str) -> Result<Self> {
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got {part:?}")))?;
            let num = || v.trim().parse::<f64>().map_err(|e| Error::Config(format!("{k}: {e}")));
            match k.trim() {
                "rtt" => self.rtt = num()?,
                "bandwidth" | "bw" => self.bandwidth = num()?,
                "per_op" | "per_op_overhead" => self.per_op_overhead = num()?,
                "max_batch" => {
                    self.max_batch = v.trim().parse().map_err(|e| Error::Config(format!("max_batch: {e}")))?
                }
                "real_sleep" => self.real_sleep = matches!(v.trim(), "1" | "true" | "yes"),
                other => return Err(Error::Config(format!("unknown cost-model key {other:?}"))),
            }
        }
        self.validate()?;
        Ok(self)
    }

    pub fn from_env_or(self) -> Result<Self> {
        match std::env::var(COST_MODEL_ENV) {
            Ok(spec) => self.with_overrides(&spec),
            Err(_) => Ok(self),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RegionHandle {
    pub id: u32,
    pub size: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Op {
    Read { region: u32, offset: u64, len: u64 },
    Write { region: u32, offset: u64, data: Vec<u8> },
}

impl Op {
    pub fn len(&self) -> u64 {
        match self {
            Op::Read { len, .. } => *len,
            Op::Write { data, .. } => data.len() as u64,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn target(&self) -> (u32, u64, u64) {
        match self {
            Op::Read { region, offset, len } => (*region, *offset, *len),
            Op::Write { region, offset, data } => (*region, *offset, data.len() as u64),
        }
    }
}

/// A completed operation and the simulated time it was charged.
#[derive(Debug, Clone, PartialEq)]
pub struct Transfer<T> {
    pub value: T,
    pub cost: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum AccessKind {
    Read,
    Write,
}

/// One descriptor as recorded by the access trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AccessRecord {
    pub kind: AccessKind,
    pub region: u32,
    pub offset: u64,
    pub len: u64,
    /// Sequence number of the doorbell batch, `None` for single operations.
    pub batch: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct FabricStats {
    pub reads: u64,
    pub writes: u64,
    pub doorbell_batches: u64,
    pub bytes_moved: u64,
    pub simulated_time: f64,
}

impl FabricStats {
    pub fn round_trips(&self) -> u64 {
        self.reads + self.writes + self.doorbell_batches
    }

    pub fn delta(&self, earlier: &FabricStats) -> FabricStats {
        FabricStats {
            reads: self.reads - earlier.reads,
            writes: self.writes - earlier.writes,
            doorbell_batches: self.doorbell_batches - earlier.doorbell_batches,
            bytes_moved: self.bytes_moved - earlier.bytes_moved,
            simulated_time: self.simulated_time - earlier.simulated_time,
        }
    }
}

/// The operation set shared by the in-process fabric and the socket client.
pub trait RemoteMemory: Send + Sync {
    fn register_region(&self, size: u64) -> Result<RegionHandle>;
    fn free_region(&self, region: u32) -> Result<()>;
    fn read(&self, region: u32, offset: u64, len: u64) -> Result<Transfer<Vec<u8>>>;
    fn write(&self, region: u32, offset: u64, data: &[u8]) -> Result<Transfer<()>>;
    /// Applies `ops` in order as one batch; returns the read payloads in order.
    fn doorbell(&self, ops: Vec<Op>) -> Result<Transfer<Vec<Vec<u8>>>>;
    fn stats(&self) -> FabricStats;
    fn cost_model(&self) -> CostModel;
}

#[derive(Default)]
struct Counters {
    reads: AtomicU64,
    writes: AtomicU64,
    doorbells: AtomicU64,
    bytes: AtomicU64,
    time: Mutex<f64>,
}

impl Counters {
    fn charge(&self, cost: f64) {
        *self.time.lock().unwrap() += cost;
    }

    fn snapshot(&self) -> FabricStats {
        FabricStats {
            reads: self.reads.load(Ordering::SeqCst),
            writes: self.writes.load(Ordering::SeqCst),
            doorbell_batches: self.doorbells.load(Ordering::SeqCst),
            bytes_moved: self.bytes.load(Ordering::SeqCst),
            simulated_time: *self.time.lock().unwrap(),
        }
    }
}

/// In-process simulated memory node.
pub struct Fabric {
    model: CostModel,
    regions: RwLock<HashMap<u32, Vec<u8>>>,
    next_id: AtomicU32,
    counters: Counters,
    faults: Mutex<HashMap<u32, u32>>,
    trace: Mutex<Option<Vec<AccessRecord>>>,
}

impl Fabric {
    pub fn new(model: CostModel) -> Self {
        Self {
            model,
            regions: RwLock::new(HashMap::new()),
            next_id: AtomicU32::new(1),
            counters: Counters::default(),
            faults: Mutex::new(HashMap::new()),
            trace: Mutex::new(None),
        }
    }

    pub fn region_size(&self, region: u32) -> Result<u64> {
        self.regions
            .read()
            .unwrap()
            .get(&region)
            .map(|r| r.len() as u64)
            .ok_or(Error::UnknownRegion(region))
    }

    pub fn region_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.regions.read().unwrap().keys().copied().collect();
        ids.sort_unstable();
        ids
    }

    /// Makes the next `count` operations touching `region` fail.
    pub fn inject_faults(&self, region: u32, count: u32) {
        self.faults.lock().unwrap().insert(region, count);
    }

    /// Starts recording every descriptor; discards any previous trace.
    pub fn enable_trace(&self) {
        *self.trace.lock().unwrap() = Some(Vec::new());
    }

    pub fn take_trace(&self) -> Vec<AccessRecord> {
        self.trace
            .lock()
            .unwrap()
            .as_mut()
            .map(std::mem::take)
            .unwrap_or_default()
    }

    /// Copies a whole region out without charging the cost model.
    pub fn export_region(&self, region: u32) -> Result<Vec<u8>> {
        self.regions
            .read()
            .unwrap()
            .get(&region)
            .cloned()
            .ok_or(Error::UnknownRegion(region))
    }

    /// Registers a region pre-filled with `bytes`, uncharged.
    pub fn import_region(&self, bytes: Vec<u8>) -> Result<RegionHandle> {
        if bytes.is_empty() {
            return Err(Error::invalid("region size must be positive"));
        }
        let id = self.next_id.fetch_add(1, Ordering::SeqCst);
        let size = bytes.len() as u64;
        self.regions.write().unwrap().insert(id, bytes);
        Ok(RegionHandle { id, size })
    }

    fn take_fault(&self, regions: impl Iterator<Item = u32>) -> Result<()> {
        let mut faults = self.faults.lock().unwrap();
        for r in regions {
            if let Some(n) = faults.get_mut(&r) {
                if *n > 0 {
                    *n -= 1;
                    return Err(Error::InjectedFault(r));
                }
            }
        }
        Ok(())
    }

    fn record(&self, rec: AccessRecord) {
        if let Some(t) = self.trace.lock().unwrap().as_mut() {
            t.push(rec);
        }
    }

    fn settle(&self, cost: f64) {
        self.counters.charge(cost);
        if self.model.real_sleep {
            std::thread::sleep(Duration::from_secs_f64(cost));
        }
    }

    fn check_bounds(regions: &HashMap<u32, Vec<u8>>, region: u32, offset: u64, len: u64) -> Result<()> {
        let r = regions.get(&region).ok_or(Error::UnknownRegion(region))?;
        let size = r.len() as u64;
        match offset.checked_add(len) {
            Some(end) if end <= size => Ok(()),
            _ => Err(Error::OutOfBounds {
                region,
                offset,
                len,
                size,
            }),
        }
    }
}

impl RemoteMemory for Fabric {
    fn register_region(&self, size: u64) -> Result<RegionHandle> {
        if size == 0 {
            return Err(Error::invalid("region size must be positive"));
        }
        let size_usize = usize::try_from(size).map_err(|_| Error::invalid("region too large"))?;
        let mut buf = Vec::new();
        buf.try_reserve_exact(size_usize)
            .map_err(|e| Error::invalid(format!("allocation of {size} bytes failed: {e}")))?;
        buf.resize(size_usize, 0);
        let id = self.next_id.fetch_add(1, Ordering::SeqCst);
        self.regions.write().unwrap().insert(id, buf);
        Ok(RegionHandle { id, size })
    }

    fn free_region(&self, region: u32) -> Result<()> {
        self.regions
            .write()
            .unwrap()
            .remove(&region)
            .map(|_| ())
            .ok_or(Error::UnknownRegion(region))
    }

    fn read(&self, region: u32, offset: u64, len: u64) -> Result<Transfer<Vec<u8>>> {
        let data = {
            let regions = self.regions.read().unwrap();
            Self::check_bounds(&regions, region, offset, len)?;
            self.take_fault(std::iter::once(region))?;
            regions[&region][offset as usize..(offset + len) as usize].to_vec()
        };
        self.record(AccessRecord {
            kind: AccessKind::Read,
            region,
            offset,
            len,
            batch: None,
        });
        let cost = self.model.transfer_cost(len);
        self.counters.reads.fetch_add(1, Ordering::SeqCst);
        self.counters.bytes.fetch_add(len, Ordering::SeqCst);
        self.settle(cost);
        Ok(Transfer { value: data, cost })
    }

    fn write(&self, region: u32, offset: u64, data: &[u8]) -> Result<Transfer<()>> {
        let len = data.len() as u64;
        {
            let mut regions = self.regions.write().unwrap();
            Self::check_bounds(&regions, region, offset, len)?;
            self.take_fault(std::iter::once(region))?;
            let r = regions.get_mut(&region).unwrap();
            r[offset as usize..(offset + len) as usize].copy_from_slice(data);
        }
        self.record(AccessRecord {
            kind: AccessKind::Write,
            region,
            offset,
            len,
            batch: None,
        });
        let cost = self.model.transfer_cost(len);
        self.counters.writes.fetch_add(1, Ordering::SeqCst);
        self.counters.bytes.fetch_add(len, Ordering::SeqCst);
        self.settle(cost);
        Ok(Transfer { value: (), cost })
    }

    fn doorbell(&self, ops: Vec<Op>) -> Result<Transfer<Vec<Vec<u8>>>> {
        if ops.is_empty() {
            return Err(Error::invalid("doorbell batch must contain at least one operation"));
        }
        if ops.len() > self.model.max_batch {
            return Err(Error::BatchTooLarge {
                got: ops.len(),
                max: self.model.max_batch,
            });
        }
        let total: u64 = ops.iter().map(Op::len).sum();
        let n_ops = ops.len();
        let mut reads = Vec::new();
        let batch_no;
        {
            let mut regions = self.regions.write().unwrap();
            for op in &ops {
                let (r, o, l) = op.target();
                Self::check_bounds(&regions, r, o, l)?;
            }
            self.take_fault(ops.iter().map(|op| op.target().0))?;
            batch_no = self.counters.doorbells.fetch_add(1, Ordering::SeqCst);
            for op in ops {
                let (region, offset, len) = op.target();
                let buf = regions.get_mut(&region).unwrap();
                let span = offset as usize..(offset + len) as usize;
                let kind = match op {
                    Op::Read { .. } => {
                        reads.push(buf[span].to_vec());
                        AccessKind::Read
                    }
                    Op::Write { data, .. } => {
                        buf[span].copy_from_slice(&data);
                        AccessKind::Write
                    }
                };
                self.record(AccessRecord {
                    kind,
                    region,
                    offset,
                    len,
                    batch: Some(batch_no),
                });
            }
        }
        let cost = self.model.doorbell_cost(total, n_ops);
        self.counters.bytes.fetch_add(total, Ordering::SeqCst);
        self.settle(cost);
        Ok(Transfer { value: reads, cost })
    }

    fn stats(&self) -> FabricStats {
        self.counters.snapshot()
    }

    fn cost_model(&self) -> CostModel {
        self.model
    }
}
