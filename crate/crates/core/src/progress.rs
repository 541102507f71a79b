//! The progress agent.
//!
//! Each agent runs a probe loop over its inbox. GET and PUT commands are
//! performed immediately and their completion is recorded in a FIFO request
//! queue; the queue is drained (one flush per distinct `(dest, segid)` in the
//! batch) when an origin sends WAIT or when a probe finds nothing to do.
//! ALLOC and FREE make the agent join or leave a collective segment, and EXIT
//! from every bound origin stops the loop.

use std::collections::{BTreeSet, HashSet, VecDeque};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::memory::{GlobalPtr, LocalView};
use crate::rma::Packet;
use crate::runtime::{Shared, UnitId};
use crate::transport::{CtrlMessage, Header, Tag};

/// Completion record of one agent-initiated transfer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Request {
    pub dest: UnitId,
    pub segid: u32,
    pub origin: UnitId,
}

/// Snapshot of an agent's counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AgentMetrics {
    /// GET/PUT commands performed.
    pub requests: u64,
    pub flushes: u64,
    /// Non-empty queue drains.
    pub batches: u64,
    pub idle_drains: u64,
    pub wait_drains: u64,
    pub protocol_errors: u64,
    pub queue_len: u64,
    pub queue_peak: u64,
    pub exited: bool,
}

#[derive(Debug, Default)]
pub(crate) struct AgentCounters {
    requests: AtomicU64,
    flushes: AtomicU64,
    batches: AtomicU64,
    idle_drains: AtomicU64,
    wait_drains: AtomicU64,
    protocol_errors: AtomicU64,
    queue_len: AtomicU64,
    queue_peak: AtomicU64,
    exited: AtomicBool,
}

impl AgentCounters {
    pub(crate) fn snapshot(&self) -> AgentMetrics {
        let get = |c: &AtomicU64| c.load(Ordering::Acquire);
        AgentMetrics {
            requests: get(&self.requests),
            flushes: get(&self.flushes),
            batches: get(&self.batches),
            idle_drains: get(&self.idle_drains),
            wait_drains: get(&self.wait_drains),
            protocol_errors: get(&self.protocol_errors),
            queue_len: get(&self.queue_len),
            queue_peak: get(&self.queue_peak),
            exited: self.exited.load(Ordering::Acquire),
        }
    }

    fn bump(c: &AtomicU64) {
        c.fetch_add(1, Ordering::AcqRel);
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum DrainCause {
    Idle,
    Wait,
    Housekeeping,
}

pub(crate) struct Agent {
    shared: Arc<Shared>,
    me: UnitId,
    counters: Arc<AgentCounters>,
    queue: VecDeque<Request>,
    // origins with an unreported failure since their last WAIT
    failed: BTreeSet<UnitId>,
    exits: usize,
    expected_exits: usize,
}

impl Agent {
    pub(crate) fn new(shared: Arc<Shared>, me: UnitId) -> Agent {
        let counters = shared.counters[&me].clone();
        let expected_exits = shared.topology.bound_to(me).len().max(1);
        Agent {
            shared,
            me,
            counters,
            queue: VecDeque::new(),
            failed: BTreeSet::new(),
            exits: 0,
            expected_exits,
        }
    }

    pub(crate) fn run(mut self) {
        let idle_park = self.shared.config.idle_park;
        while self.exits < self.expected_exits {
            match self.shared.transport.iprobe(self.me) {
                Some(h) => self.dispatch(h),
                None if !self.queue.is_empty() => self.drain(DrainCause::Idle),
                None => {
                    self.shared.transport.wait_message(self.me, idle_park);
                }
            }
        }
        self.drain(DrainCause::Housekeeping);
        let home = self.shared.topology.home_of(self.me);
        let _ = self.shared.transport.send_ctrl(CtrlMessage {
            src: self.me,
            dst: home,
            tag: Tag::Exit,
            payload: Vec::new(),
        });
        self.counters.exited.store(true, Ordering::Release);
        self.shared.transport.close(self.me);
    }

    fn dispatch(&mut self, h: Header) {
        let msg = match self.shared.transport.recv_ctrl(self.me, h.src, h.tag) {
            Ok(m) => m,
            Err(e) => {
                // the probed message vanished; nothing sane left to do with it
                self.protocol_error(h.src, &e.to_string());
                return;
            }
        };
        match h.tag {
            Tag::Get | Tag::Put => {
                match self.perform(&msg) {
                    Ok(req) => {
                        self.queue.push_back(req);
                        AgentCounters::bump(&self.counters.requests);
                        let len = self.queue.len() as u64;
                        self.counters.queue_len.store(len, Ordering::Release);
                        self.counters.queue_peak.fetch_max(len, Ordering::AcqRel);
                    }
                    Err(e) => self.protocol_error(msg.src, &e.to_string()),
                }
            }
            Tag::Wait => {
                self.drain(DrainCause::Wait);
                let status = u8::from(self.failed.remove(&msg.src));
                if let Err(e) = self.shared.transport.send_ctrl(CtrlMessage {
                    src: self.me,
                    dst: msg.src,
                    tag: Tag::WaitDone,
                    payload: vec![status],
                }) {
                    self.protocol_error(msg.src, &e.to_string());
                }
            }
            Tag::Alloc => {
                let joined = index_of(&msg)
                    .and_then(|i| self.shared.memory.agent_join_alloc(self.me, i));
                if let Err(e) = joined {
                    self.protocol_error(msg.src, &e.to_string());
                }
            }
            Tag::Free => {
                // nothing of ours may still be in flight into the segment
                self.drain(DrainCause::Housekeeping);
                let left = index_of(&msg)
                    .and_then(|i| self.shared.memory.agent_ack_free(self.me, i));
                if let Err(e) = left {
                    self.protocol_error(msg.src, &e.to_string());
                }
            }
            Tag::Exit => self.exits += 1,
            Tag::WaitDone => {
                self.protocol_error(msg.src, "unexpected WAIT_DONE at a progress agent")
            }
        }
    }

    /// Starts the transfer a GET/PUT command describes.
    fn perform(&self, msg: &CtrlMessage) -> Result<Request> {
        let p = Packet::decode(&msg.payload)?;
        let sh = &self.shared;
        let origin = msg.src;
        let dest = sh
            .topology
            .unit(p.dest)
            .filter(|u| !u.is_agent())
            .ok_or_else(|| Error::Protocol(format!("packet targets invalid unit {}", p.dest)))?;
        if (p.is_shmem == 1) != (dest.node() == origin.node()) {
            return Err(Error::Protocol(format!(
                "is_shmem={} disagrees with placement of {origin} and {dest}",
                p.is_shmem
            )));
        }
        let n = usize::try_from(p.data_size)
            .map_err(|_| Error::Protocol("data size out of range".into()))?;
        let offset = |o: u64| {
            usize::try_from(o).map_err(|_| Error::Protocol("offset out of range".into()))
        };
        let target = GlobalPtr {
            unit: dest,
            segid: p.segid,
            index: p.index,
            offset: offset(p.target_offset)?,
        };
        let local = GlobalPtr {
            unit: origin,
            offset: offset(p.origin_offset)?,
            ..target
        };
        let target_view = sh.memory.resolve(target, self.me, n)?;
        let LocalView::Direct(origin_view) = sh.memory.resolve(local, self.me, n)? else {
            return Err(Error::Protocol(format!(
                "{origin} is not on the node of {}",
                self.me
            )));
        };
        match msg.tag {
            Tag::Get => sh.transport.rma_read(self.me, &target_view, &origin_view, n)?,
            _ => sh.transport.rma_write(self.me, &origin_view, &target_view, n)?,
        };
        Ok(Request {
            dest,
            segid: p.segid,
            origin,
        })
    }

    /// Flushes every queued request, once per distinct `(dest, segid)`.
    fn drain(&mut self, cause: DrainCause) {
        if self.queue.is_empty() {
            return;
        }
        let mut done = HashSet::new();
        while let Some(r) = self.queue.pop_front() {
            if done.insert((r.dest, r.segid)) {
                self.shared.transport.flush(self.me, r.dest, r.segid);
                AgentCounters::bump(&self.counters.flushes);
            }
            self.counters
                .queue_len
                .store(self.queue.len() as u64, Ordering::Release);
        }
        AgentCounters::bump(&self.counters.batches);
        match cause {
            DrainCause::Idle => AgentCounters::bump(&self.counters.idle_drains),
            DrainCause::Wait => AgentCounters::bump(&self.counters.wait_drains),
            DrainCause::Housekeeping => {}
        }
    }

    fn protocol_error(&mut self, origin: UnitId, text: &str) {
        AgentCounters::bump(&self.counters.protocol_errors);
        self.shared.transport.log_error(self.me, origin, text);
        self.failed.insert(origin);
    }
}

fn index_of(msg: &CtrlMessage) -> Result<u32> {
    let b: [u8; 4] = msg.payload.as_slice().try_into().map_err(|_| {
        Error::Protocol(format!(
            "{} payload of {} bytes, expected a 4-byte team index",
            msg.tag,
            msg.payload.len()
        ))
    })?;
    Ok(u32::from_le_bytes(b))
}
