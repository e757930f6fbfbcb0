//! Experimental byte-stream transport for the fabric operation set.
//!
//! Every request and response is a 21-byte little-endian header followed by
//! `len` payload bytes:
//!
//! ```text
//! request:  opcode u8 | region u32 | offset u64 | len u64 | payload
//! response: status u8 | region u32 | offset u64 | len u64 | payload
//! ```
//!
//! | opcode | name     | request                               | response payload       |
//! |--------|----------|---------------------------------------|------------------------|
//! | 1      | REGISTER | `len` = region size, no payload       | none; `region` = new id |
//! | 2      | READ     | region, offset, len                   | `len` bytes            |
//! | 3      | WRITE    | region, offset, len, `len` bytes      | none                   |
//! | 4      | DOORBELL | `len` = payload size; payload = `count u32` then `count` nested READ/WRITE requests | concatenated read payloads |
//! | 5      | FREE     | region                                | none                   |
//!
//! Status 0 means success. Any other status carries a UTF-8 error message as
//! payload. The server applies requests against one shared [`Fabric`];
//! the client charges its own copy of the cost model so both ends agree on
//! simulated time.

use std::io::{BufReader, BufWriter, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use super::{CostModel, Fabric, FabricStats, Op, RegionHandle, RemoteMemory, Transfer};
use crate::error::{Error, Result};

pub const OP_REGISTER: u8 = 1;
pub const OP_READ: u8 = 2;
pub const OP_WRITE: u8 = 3;
pub const OP_DOORBELL: u8 = 4;
pub const OP_FREE: u8 = 5;

pub const STATUS_OK: u8 = 0;
pub const STATUS_ERR: u8 = 1;

pub const HEADER_LEN: usize = 21;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub code: u8,
    pub region: u32,
    pub offset: u64,
    pub len: u64,
    pub payload: Vec<u8>,
}

impl Message {
    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.push(self.code);
        out.extend_from_slice(&self.region.to_le_bytes());
        out.extend_from_slice(&self.offset.to_le_bytes());
        out.extend_from_slice(&self.len.to_le_bytes());
        out.extend_from_slice(&self.payload);
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut v = Vec::with_capacity(HEADER_LEN + self.payload.len());
        self.encode_into(&mut v);
        v
    }

    fn parse_header(h: &[u8; HEADER_LEN]) -> (u8, u32, u64, u64) {
        (
            h[0],
            u32::from_le_bytes(h[1..5].try_into().unwrap()),
            u64::from_le_bytes(h[5..13].try_into().unwrap()),
            u64::from_le_bytes(h[13..21].try_into().unwrap()),
        )
    }

    /// Reads one message. `with_payload(code)` says whether `len` bytes of
    /// payload follow the header.
    pub fn read_from(r: &mut impl Read, with_payload: impl Fn(u8) -> bool) -> Result<Self> {
        let mut h = [0u8; HEADER_LEN];
        r.read_exact(&mut h)?;
        let (code, region, offset, len) = Self::parse_header(&h);
        let mut payload = Vec::new();
        if with_payload(code) {
            payload.resize(len as usize, 0);
            r.read_exact(&mut payload)?;
        }
        Ok(Self {
            code,
            region,
            offset,
            len,
            payload,
        })
    }

    /// Parses a message from the front of `buf`, returning it and the rest.
    pub fn parse(buf: &[u8], with_payload: impl Fn(u8) -> bool) -> Result<(Self, &[u8])> {
        if buf.len() < HEADER_LEN {
            return Err(Error::Transport("short message header".into()));
        }
        let (code, region, offset, len) = Self::parse_header(buf[..HEADER_LEN].try_into().unwrap());
        let rest = &buf[HEADER_LEN..];
        let plen = if with_payload(code) { len as usize } else { 0 };
        if rest.len() < plen {
            return Err(Error::Transport("short message payload".into()));
        }
        Ok((
            Self {
                code,
                region,
                offset,
                len,
                payload: rest[..plen].to_vec(),
            },
            &rest[plen..],
        ))
    }
}

fn request_has_payload(code: u8) -> bool {
    matches!(code, OP_WRITE | OP_DOORBELL)
}

fn response_has_payload(_status: u8) -> bool {
    true
}

fn ok(region: u32, offset: u64, payload: Vec<u8>) -> Message {
    Message {
        code: STATUS_OK,
        region,
        offset,
        len: payload.len() as u64,
        payload,
    }
}

fn decode_batch(payload: &[u8]) -> Result<Vec<Op>> {
    if payload.len() < 4 {
        return Err(Error::Transport("doorbell payload missing count".into()));
    }
    let count = u32::from_le_bytes(payload[..4].try_into().unwrap()) as usize;
    let mut rest = &payload[4..];
    let mut ops = Vec::with_capacity(count);
    for _ in 0..count {
        let (m, tail) = Message::parse(rest, request_has_payload)?;
        rest = tail;
        ops.push(match m.code {
            OP_READ => Op::Read {
                region: m.region,
                offset: m.offset,
                len: m.len,
            },
            OP_WRITE => Op::Write {
                region: m.region,
                offset: m.offset,
                data: m.payload,
            },
            c => return Err(Error::Transport(format!("opcode {c} not allowed inside a doorbell"))),
        });
    }
    if !rest.is_empty() {
        return Err(Error::Transport("trailing bytes after doorbell descriptors".into()));
    }
    Ok(ops)
}

pub fn encode_batch(ops: &[Op]) -> Vec<u8> {
    let mut out = (ops.len() as u32).to_le_bytes().to_vec();
    for op in ops {
        let m = match op {
            Op::Read { region, offset, len } => Message {
                code: OP_READ,
                region: *region,
                offset: *offset,
                len: *len,
                payload: Vec::new(),
            },
            Op::Write { region, offset, data } => Message {
                code: OP_WRITE,
                region: *region,
                offset: *offset,
                len: data.len() as u64,
                payload: data.clone(),
            },
        };
        m.encode_into(&mut out);
    }
    out
}

fn handle(fabric: &Fabric, req: Message) -> Result<Message> {
    match req.code {
        OP_REGISTER => {
            let h = fabric.register_region(req.len)?;
            Ok(Message {
                code: STATUS_OK,
                region: h.id,
                offset: 0,
                len: 0,
                payload: Vec::new(),
            })
        }
        OP_READ => Ok(ok(req.region, req.offset, fabric.read(req.region, req.offset, req.len)?.value)),
        OP_WRITE => {
            fabric.write(req.region, req.offset, &req.payload)?;
            Ok(ok(req.region, req.offset, Vec::new()))
        }
        OP_DOORBELL => {
            let ops = decode_batch(&req.payload)?;
            let reads = fabric.doorbell(ops)?.value;
            Ok(ok(0, 0, reads.concat()))
        }
        OP_FREE => {
            fabric.free_region(req.region)?;
            Ok(ok(req.region, 0, Vec::new()))
        }
        c => Err(Error::Transport(format!("unknown opcode {c}"))),
    }
}

fn serve_connection(fabric: Arc<Fabric>, stream: TcpStream) -> Result<()> {
    stream.set_nodelay(true).ok();
    let mut r = BufReader::new(stream.try_clone()?);
    let mut w = BufWriter::new(stream);
    loop {
        let req = match Message::read_from(&mut r, request_has_payload) {
            Ok(m) => m,
            Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(()),
            Err(e) => return Err(e),
        };
        let resp = handle(&fabric, req).unwrap_or_else(|e| {
            let msg = e.to_string().into_bytes();
            Message {
                code: STATUS_ERR,
                region: 0,
                offset: 0,
                len: msg.len() as u64,
                payload: msg,
            }
        });
        w.write_all(&resp.encode())?;
        w.flush()?;
    }
}

/// Accepts connections until the listener fails, one thread per client.
pub fn serve(fabric: Arc<Fabric>, listener: TcpListener) -> thread::JoinHandle<()> {
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { break };
            let fabric = Arc::clone(&fabric);
            thread::spawn(move || {
                let _ = serve_connection(fabric, stream);
            });
        }
    })
}

#[derive(Default)]
struct LocalCounters {
    reads: AtomicU64,
    writes: AtomicU64,
    doorbells: AtomicU64,
    bytes: AtomicU64,
    time: Mutex<f64>,
}

/// Client side of the transport. Implements [`RemoteMemory`] so engines can
/// run against a memory daemon in another process.
pub struct TcpFabric {
    model: CostModel,
    conn: Mutex<(BufReader<TcpStream>, BufWriter<TcpStream>)>,
    counters: LocalCounters,
}

impl TcpFabric {
    pub fn connect(addr: impl ToSocketAddrs, model: CostModel) -> Result<Self> {
        let s = TcpStream::connect(addr)?;
        s.set_nodelay(true).ok();
        Ok(Self {
            model,
            conn: Mutex::new((BufReader::new(s.try_clone()?), BufWriter::new(s))),
            counters: LocalCounters::default(),
        })
    }

    fn call(&self, req: Message) -> Result<Message> {
        let mut conn = self.conn.lock().unwrap();
        conn.1.write_all(&req.encode())?;
        conn.1.flush()?;
        let resp = Message::read_from(&mut conn.0, response_has_payload)?;
        if resp.code != STATUS_OK {
            return Err(Error::Transport(String::from_utf8_lossy(&resp.payload).into_owned()));
        }
        Ok(resp)
    }

    fn charge(&self, cost: f64, bytes: u64) {
        self.counters.bytes.fetch_add(bytes, Ordering::SeqCst);
        *self.counters.time.lock().unwrap() += cost;
    }
}

impl RemoteMemory for TcpFabric {
    fn register_region(&self, size: u64) -> Result<RegionHandle> {
        let resp = self.call(Message {
            code: OP_REGISTER,
            region: 0,
            offset: 0,
            len: size,
            payload: Vec::new(),
        })?;
        Ok(RegionHandle { id: resp.region, size })
    }

    fn free_region(&self, region: u32) -> Result<()> {
        self.call(Message {
            code: OP_FREE,
            region,
            offset: 0,
            len: 0,
            payload: Vec::new(),
        })?;
        Ok(())
    }

    fn read(&self, region: u32, offset: u64, len: u64) -> Result<Transfer<Vec<u8>>> {
        let resp = self.call(Message {
            code: OP_READ,
            region,
            offset,
            len,
            payload: Vec::new(),
        })?;
        let cost = self.model.transfer_cost(len);
        self.counters.reads.fetch_add(1, Ordering::SeqCst);
        self.charge(cost, len);
        Ok(Transfer {
            value: resp.payload,
            cost,
        })
    }

    fn write(&self, region: u32, offset: u64, data: &[u8]) -> Result<Transfer<()>> {
        self.call(Message {
            code: OP_WRITE,
            region,
            offset,
            len: data.len() as u64,
            payload: data.to_vec(),
        })?;
        let cost = self.model.transfer_cost(data.len() as u64);
        self.counters.writes.fetch_add(1, Ordering::SeqCst);
        self.charge(cost, data.len() as u64);
        Ok(Transfer { value: (), cost })
    }

    fn doorbell(&self, ops: Vec<Op>) -> Result<Transfer<Vec<Vec<u8>>>> {
        let payload = encode_batch(&ops);
        let resp = self.call(Message {
            code: OP_DOORBELL,
            region: 0,
            offset: 0,
            len: payload.len() as u64,
            payload,
        })?;
        let mut reads = Vec::new();
        let mut at = 0usize;
        for op in &ops {
            if let Op::Read { len, .. } = op {
                let end = at + *len as usize;
                if end > resp.payload.len() {
                    return Err(Error::Transport("short doorbell response".into()));
                }
                reads.push(resp.payload[at..end].to_vec());
                at = end;
            }
        }
        let total: u64 = ops.iter().map(Op::len).sum();
        let cost = self.model.doorbell_cost(total, ops.len());
        self.counters.doorbells.fetch_add(1, Ordering::SeqCst);
        self.charge(cost, total);
        Ok(Transfer { value: reads, cost })
    }

    fn stats(&self) -> FabricStats {
        FabricStats {
            reads: self.counters.reads.load(Ordering::SeqCst),
            writes: self.counters.writes.load(Ordering::SeqCst),
            doorbell_batches: self.counters.doorbells.load(Ordering::SeqCst),
            bytes_moved: self.counters.bytes.load(Ordering::SeqCst),
            simulated_time: *self.counters.time.lock().unwrap(),
        }
    }

    fn cost_model(&self) -> CostModel {
        self.model
    }
}
