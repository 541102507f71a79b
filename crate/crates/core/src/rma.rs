//! One-sided put/get, completion, and the packet handed to progress agents.
//!
//! A non-blocking operation takes one of three paths:
//!
//! * agent: the operation is encoded as a [`Packet`] and sent to the origin's
//!   progress agent, which performs it and queues its completion flush,
//! * direct: the origin issues the transfer itself and flushes on `wait`,
//! * deferred: only a descriptor is recorded; the transfer starts in `wait`.
//!
//! In [`ProgressMode::Agent`] operations larger than the threshold take the
//! agent path and smaller ones the direct path. [`ProgressMode::EagerDirect`]
//! always takes the direct path and [`ProgressMode::Deferred`] the deferred
//! one.

use std::collections::BTreeSet;
use std::fmt;

use crate::config::ProgressMode;
use crate::error::{Error, Result};
use crate::memory::{DirectView, GlobalPtr, LocalView};
use crate::runtime::{HandleInfo, Unit, UnitId};
use crate::transport::{CtrlMessage, Tag};

/// Encoded size of a [`Packet`].
pub const PACKET_LEN: usize = 41;

/// Description of a transfer an agent performs for an origin. All offsets
/// are relative to the start of the respective unit's portion of `segid`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Packet {
    /// Global rank of the target unit.
    pub dest: u32,
    /// Team index of the segment.
    pub index: u32,
    pub origin_offset: u64,
    pub target_offset: u64,
    pub data_size: u64,
    /// 0 for the reserved region, collective segments count from 1.
    pub segid: u32,
    /// 1 iff origin and target live on the same node.
    pub is_shmem: u8,
}

impl Packet {
    /// Little-endian, no padding: dest u32, index u32, origin_offset u64,
    /// target_offset u64, data_size u64, segid u64, is_shmem u8.
    pub fn encode(&self) -> [u8; PACKET_LEN] {
        let mut b = [0u8; PACKET_LEN];
        b[0..4].copy_from_slice(&self.dest.to_le_bytes());
        b[4..8].copy_from_slice(&self.index.to_le_bytes());
        b[8..16].copy_from_slice(&self.origin_offset.to_le_bytes());
        b[16..24].copy_from_slice(&self.target_offset.to_le_bytes());
        b[24..32].copy_from_slice(&self.data_size.to_le_bytes());
        b[32..40].copy_from_slice(&u64::from(self.segid).to_le_bytes());
        b[40] = self.is_shmem;
        b
    }

    pub fn decode(bytes: &[u8]) -> Result<Packet> {
        if bytes.len() != PACKET_LEN {
            return Err(Error::Protocol(format!(
                "packet of {} bytes, expected {PACKET_LEN}",
                bytes.len()
            )));
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let u64_at = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().expect("8 bytes"));
        let segid = u32::try_from(u64_at(32))
            .map_err(|_| Error::Protocol(format!("segment id {} out of range", u64_at(32))))?;
        let is_shmem = bytes[40];
        if is_shmem > 1 {
            return Err(Error::Protocol(format!("is_shmem flag {is_shmem}")));
        }
        Ok(Packet {
            dest: u32_at(0),
            index: u32_at(4),
            origin_offset: u64_at(8),
            target_offset: u64_at(16),
            data_size: u64_at(24),
            segid,
            is_shmem,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Get,
    Put,
}

impl OpKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OpKind::Get => "get",
            OpKind::Put => "put",
        }
    }

    fn tag(self) -> Tag {
        match self {
            OpKind::Get => Tag::Get,
            OpKind::Put => Tag::Put,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HandleId {
    pub origin: u32,
    pub seq: u64,
    pub op: OpKind,
}

impl fmt::Display for HandleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}@unit{}", self.op.as_str(), self.seq, self.origin)
    }
}

/// Source of a put.
#[derive(Debug, Clone, Copy)]
pub enum PutSource<'a> {
    /// Bytes in a segment of the origin. Required for the agent path, which
    /// reaches the source through the origin's portion of the target segment.
    Segment(GlobalPtr),
    /// Arbitrary origin memory; direct and deferred paths only.
    Bytes(&'a [u8]),
}

#[derive(Debug)]
enum Route {
    Agent(UnitId),
    Direct { dest: UnitId, segid: u32 },
    Deferred(Pending),
}

#[derive(Debug)]
enum Pending {
    Get { target: LocalView, into: DirectView },
    PutView { from: DirectView, target: LocalView },
    PutBytes { data: Vec<u8>, target: LocalView },
}

/// A non-blocking operation in flight. Complete it with [`Unit::wait`] or
/// [`Unit::waitall`]; dropping it uncompleted is reported at finalize.
#[derive(Debug)]
pub struct Handle {
    id: HandleId,
    route: Route,
    completed: bool,
}

impl Handle {
    pub fn id(&self) -> HandleId {
        self.id
    }

    pub fn op(&self) -> OpKind {
        self.id.op
    }

    /// Agent performing the operation, `None` on the direct and deferred paths.
    pub fn agent(&self) -> Option<UnitId> {
        match self.route {
            Route::Agent(a) => Some(a),
            _ => None,
        }
    }

    pub fn is_completed(&self) -> bool {
        self.completed
    }
}

impl Unit {
    /// Packet describing a transfer of `nbytes` between `gptr` and this
    /// unit's portion of the same segment at `origin_offset`.
    pub fn encode_packet(&self, gptr: GlobalPtr, origin_offset: usize, nbytes: usize) -> Result<Packet> {
        self.resolve(gptr, nbytes)?;
        self.resolve(self.own(gptr, origin_offset), nbytes)?;
        Ok(Packet {
            dest: gptr.unit.rank(),
            index: gptr.index,
            origin_offset: origin_offset as u64,
            target_offset: gptr.offset as u64,
            data_size: nbytes as u64,
            segid: gptr.segid,
            is_shmem: u8::from(gptr.unit.node() == self.id.node()),
        })
    }

    fn own(&self, gptr: GlobalPtr, offset: usize) -> GlobalPtr {
        GlobalPtr {
            unit: self.id,
            offset,
            ..gptr
        }
    }

    fn uses_agent(&self, nbytes: usize) -> bool {
        self.mode() == ProgressMode::Agent && nbytes > self.config().threshold_bytes
    }

    fn local_view(&self, gptr: GlobalPtr, nbytes: usize) -> Result<DirectView> {
        if gptr.unit != self.id {
            return Err(Error::Argument(format!(
                "{gptr} is not local to {}",
                self.id
            )));
        }
        Ok(self
            .resolve(gptr, nbytes)?
            .direct()
            .expect("own memory resolves directly"))
    }

    fn check_same_segment(&self, target: GlobalPtr, local: GlobalPtr) -> Result<()> {
        if local.unit != self.id || local.segid != target.segid || local.index != target.index {
            return Err(Error::Argument(format!(
                "agent-path transfers need the origin buffer in {}'s portion of segment {} \
                 (got {local})",
                self.id, target.segid
            )));
        }
        Ok(())
    }

    fn new_handle(&mut self, op: OpKind, segid: u32, route: Route) -> Handle {
        let id = HandleId {
            origin: self.id.rank(),
            seq: self.next_seq,
            op,
        };
        self.next_seq += 1;
        self.shared
            .handles
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .insert(id, HandleInfo { segid });
        Handle {
            id,
            route,
            completed: false,
        }
    }

    fn send_packet(&self, op: OpKind, packet: &Packet) -> Result<UnitId> {
        let agent = self.topology().agent_for(self.id, self.next_seq)?;
        let woke = self.transport().post_ctrl(CtrlMessage {
            src: self.id,
            dst: agent,
            tag: op.tag(),
            payload: packet.encode().to_vec(),
        })?;
        // A parked agent gets the core so the transfer starts now rather
        // than at the end of this unit's time slice when cores are
        // oversubscribed. A busy agent picks the packet up when it probes.
        if woke {
            std::thread::yield_now();
        }
        Ok(agent)
    }

    /// Starts reading `nbytes` at `src` into this unit's memory at `dst`.
    pub fn get_nb(&mut self, src: GlobalPtr, dst: GlobalPtr, nbytes: usize) -> Result<Handle> {
        if nbytes == 0 {
            return Err(Error::Argument("transfer size must be positive".into()));
        }
        let into = self.local_view(dst, nbytes)?;
        let target = self.resolve(src, nbytes)?;
        let route = if self.uses_agent(nbytes) {
            self.check_same_segment(src, dst)?;
            let packet = self.encode_packet(src, dst.offset, nbytes)?;
            Route::Agent(self.send_packet(OpKind::Get, &packet)?)
        } else if self.mode() == ProgressMode::Deferred {
            Route::Deferred(Pending::Get { target, into })
        } else {
            self.transport().rma_read(self.id, &target, &into, nbytes)?;
            Route::Direct {
                dest: src.unit,
                segid: src.segid,
            }
        };
        Ok(self.new_handle(OpKind::Get, src.segid, route))
    }

    /// Starts writing `nbytes` from `src` to `dst`.
    pub fn put_nb(&mut self, dst: GlobalPtr, src: PutSource<'_>, nbytes: usize) -> Result<Handle> {
        if nbytes == 0 {
            return Err(Error::Argument("transfer size must be positive".into()));
        }
        if let PutSource::Bytes(b) = src {
            if b.len() != nbytes {
                return Err(Error::Argument(format!(
                    "source holds {} bytes, {nbytes} requested",
                    b.len()
                )));
            }
        }
        let target = self.resolve(dst, nbytes)?;
        let route = if self.uses_agent(nbytes) {
            let PutSource::Segment(from) = src else {
                return Err(Error::Argument(
                    "agent-path puts need the source in a registered segment".into(),
                ));
            };
            self.check_same_segment(dst, from)?;
            let packet = self.encode_packet(dst, from.offset, nbytes)?;
            Route::Agent(self.send_packet(OpKind::Put, &packet)?)
        } else {
            let deferred = self.mode() == ProgressMode::Deferred;
            match src {
                PutSource::Segment(from) => {
                    let from = self.local_view(from, nbytes)?;
                    if deferred {
                        Route::Deferred(Pending::PutView { from, target })
                    } else {
                        self.transport().rma_write(self.id, &from, &target, nbytes)?;
                        Route::Direct {
                            dest: dst.unit,
                            segid: dst.segid,
                        }
                    }
                }
                PutSource::Bytes(data) => {
                    if deferred {
                        Route::Deferred(Pending::PutBytes {
                            data: data.to_vec(),
                            target,
                        })
                    } else {
                        self.transport().rma_write_bytes(self.id, data, &target)?;
                        Route::Direct {
                            dest: dst.unit,
                            segid: dst.segid,
                        }
                    }
                }
            }
        };
        Ok(self.new_handle(OpKind::Put, dst.segid, route))
    }

    /// Blocking get: `get_nb` followed by `wait`.
    pub fn get(&mut self, src: GlobalPtr, dst: GlobalPtr, nbytes: usize) -> Result<()> {
        let mut h = self.get_nb(src, dst, nbytes)?;
        self.wait(&mut h)
    }

    /// Blocking put: `put_nb` followed by `wait`.
    pub fn put(&mut self, dst: GlobalPtr, src: PutSource<'_>, nbytes: usize) -> Result<()> {
        let mut h = self.put_nb(dst, src, nbytes)?;
        self.wait(&mut h)
    }

    /// Completes `h`: afterwards a get's destination holds the target bytes
    /// and a put's target holds the source bytes. Waiting again is a no-op.
    pub fn wait(&mut self, h: &mut Handle) -> Result<()> {
        self.waitall(std::slice::from_mut(h))
    }

    /// Completes every handle. Each distinct agent among the handles gets a
    /// single WAIT; direct and deferred handles are flushed one by one.
    pub fn waitall(&mut self, hs: &mut [Handle]) -> Result<()> {
        for h in hs.iter() {
            if h.id.origin != self.id.rank() {
                return Err(Error::Usage(format!(
                    "{} waited on {}, which belongs to another unit",
                    self.id, h.id
                )));
            }
        }
        let mut first_err = None;
        // start every deferred transfer before blocking on any of them
        for h in hs.iter_mut().filter(|h| !h.completed) {
            if let Route::Deferred(p) = &h.route {
                let t = self.transport();
                let issued = match p {
                    Pending::Get { target, into } => t.rma_read(self.id, target, into, into.len()),
                    Pending::PutView { from, target } => t.rma_write(self.id, from, target, from.len()),
                    Pending::PutBytes { data, target } => t.rma_write_bytes(self.id, data, target),
                };
                match issued {
                    Ok(tok) => {
                        h.route = Route::Direct {
                            dest: tok.dest,
                            segid: tok.segid,
                        }
                    }
                    Err(e) => {
                        first_err.get_or_insert(e);
                    }
                }
            }
        }
        let mut agents = BTreeSet::new();
        let mut order = Vec::new();
        for h in hs.iter().filter(|h| !h.completed) {
            if let Route::Agent(a) = h.route {
                if agents.insert(a) {
                    order.push(a);
                }
            }
        }
        for &a in &order {
            let sent = self.transport().send_ctrl(CtrlMessage {
                src: self.id,
                dst: a,
                tag: Tag::Wait,
                payload: Vec::new(),
            });
            if let Err(e) = sent {
                first_err.get_or_insert(e);
                agents.remove(&a);
            }
        }
        for h in hs.iter().filter(|h| !h.completed) {
            if let Route::Direct { dest, segid } = h.route {
                self.transport().flush(self.id, dest, segid);
            }
        }
        for a in order.into_iter().filter(|a| agents.contains(a)) {
            match self.transport().recv_ctrl(self.id, a, Tag::WaitDone) {
                Ok(m) if m.payload.first().copied().unwrap_or(0) == 0 => {}
                Ok(_) => {
                    first_err.get_or_insert(Error::Remote {
                        agent: a.rank(),
                        origin: self.id.rank(),
                    });
                }
                Err(e) => {
                    first_err.get_or_insert(e);
                }
            }
        }
        let mut reg = self.shared.handles.lock().unwrap_or_else(|e| e.into_inner());
        for h in hs.iter_mut().filter(|h| !h.completed) {
            h.completed = true;
            reg.remove(&h.id);
        }
        drop(reg);
        match first_err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}
