//! The message substrate: ordered point-to-point control channels with a
//! non-consuming probe, and one-sided data transfers.
//!
//! Intra-node transfers are plain memory copies performed at issue time.
//! Inter-node transfers are handed to a delivery lane (one background thread
//! per ordered node pair) which lands the bytes once the modeled network
//! delay `latency + ceil(bytes / bandwidth)` has elapsed on the wall clock.
//! `flush` blocks until every inter-node transfer an accessor issued toward a
//! given `(dest, segid)` has landed.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::memory::{copy_between, DirectView, LocalView, Portion};
use crate::runtime::UnitId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tag {
    Get,
    Put,
    Wait,
    WaitDone,
    Alloc,
    Free,
    Exit,
}

impl Tag {
    pub fn as_str(self) -> &'static str {
        match self {
            Tag::Get => "GET",
            Tag::Put => "PUT",
            Tag::Wait => "WAIT",
            Tag::WaitDone => "WAIT_DONE",
            Tag::Alloc => "ALLOC",
            Tag::Free => "FREE",
            Tag::Exit => "EXIT",
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CtrlMessage {
    pub src: UnitId,
    pub dst: UnitId,
    pub tag: Tag,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub src: UnitId,
    pub tag: Tag,
}

/// Record of one issued data transfer. Times are relative to the
/// transport's epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransferToken {
    pub accessor: UnitId,
    pub dest: UnitId,
    pub segid: u32,
    pub bytes: usize,
    pub inter_node: bool,
    pub issue_time: Duration,
    pub complete_time: Duration,
}

/// Latency/bandwidth model for inter-node payloads.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModel {
    pub latency: Duration,
    /// Bytes per second.
    pub bandwidth: f64,
    pub dilation: f64,
}

impl CostModel {
    /// `latency + ceil(bytes / bandwidth)` at nanosecond resolution, scaled
    /// by the dilation factor.
    pub fn delay(&self, bytes: usize) -> Duration {
        let wire_ns = (bytes as f64 * 1e9 / self.bandwidth).ceil();
        let wire = Duration::from_nanos(wire_ns as u64);
        (self.latency + wire).mul_f64(self.dilation)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LogKind {
    Ctrl,
    Xfer,
    Flush,
    Error,
}

impl LogKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LogKind::Ctrl => "ctrl",
            LogKind::Xfer => "xfer",
            LogKind::Flush => "flush",
            LogKind::Error => "error",
        }
    }
}

/// One transcript line. `what` is the tag name for control messages, the
/// segment id for transfers and flushes, and a description for errors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogEntry {
    pub time: Duration,
    pub kind: LogKind,
    pub src: u32,
    pub dst: u32,
    pub what: String,
    pub bytes: usize,
}

impl LogEntry {
    pub fn is_ctrl(&self, tag: Tag) -> bool {
        self.kind == LogKind::Ctrl && self.what == tag.as_str()
    }
}

impl fmt::Display for LogEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:.3}\t{}\t{}\t{}\t{}\t{}",
            self.time.as_secs_f64() * 1e6,
            self.kind.as_str(),
            self.src,
            self.dst,
            self.what,
            self.bytes
        )
    }
}

#[derive(Default)]
struct InboxState {
    queues: BTreeMap<u32, VecDeque<CtrlMessage>>,
    // next source to favour; advanced past a source whenever it is received from
    cursor: u32,
    waiting: usize,
}

impl InboxState {
    fn front(&self) -> Option<&CtrlMessage> {
        self.queues
            .range(self.cursor..)
            .chain(self.queues.range(..self.cursor))
            .find_map(|(_, q)| q.front())
    }

    fn has_any(&self) -> bool {
        self.queues.values().any(|q| !q.is_empty())
    }
}

#[derive(Default)]
struct Inbox {
    state: Mutex<InboxState>,
    cv: Condvar,
}

#[derive(Default)]
struct Tracker {
    pending: Mutex<HashMap<(u32, u32), usize>>,
    cv: Condvar,
}

impl Tracker {
    fn add(&self, key: (u32, u32)) {
        *lock(&self.pending).entry(key).or_insert(0) += 1;
    }

    fn complete(&self, key: (u32, u32)) {
        let mut p = lock(&self.pending);
        let drained = match p.get_mut(&key) {
            Some(n) => {
                *n -= 1;
                *n == 0
            }
            None => false,
        };
        if drained {
            p.remove(&key);
            drop(p);
            self.cv.notify_all();
        }
    }

    fn wait_zero(&self, key: (u32, u32)) {
        let mut p = lock(&self.pending);
        while p.contains_key(&key) {
            p = self.cv.wait(p).unwrap_or_else(|e| e.into_inner());
        }
    }

    fn outstanding(&self) -> usize {
        lock(&self.pending).values().sum()
    }
}

enum Payload {
    Read { src: Arc<Portion>, src_off: usize },
    Write { data: Vec<u8> },
}

struct Job {
    due: Instant,
    payload: Payload,
    dst: Arc<Portion>,
    dst_off: usize,
    n: usize,
    tracker: Arc<Tracker>,
    key: (u32, u32),
}

impl Job {
    fn land(self) {
        match &self.payload {
            Payload::Read { src, src_off } => {
                copy_between(src, *src_off, &self.dst, self.dst_off, self.n)
            }
            Payload::Write { data } => {
                let view = DirectView {
                    portion: self.dst.clone(),
                    offset: self.dst_off,
                    len: self.n,
                };
                view.write(data).expect("transfer bounds checked at issue");
            }
        }
        self.tracker.complete(self.key);
    }
}

fn lane_main(rx: mpsc::Receiver<Job>) {
    reduce_timer_slack();
    for job in rx {
        let now = Instant::now();
        if job.due > now {
            std::thread::sleep(job.due - now);
        }
        job.land();
    }
}

#[cfg(target_os = "linux")]
fn reduce_timer_slack() {
    // Sleeps would otherwise overshoot by the default 50 us slack, which is
    // the same order as the modeled latencies.
    // SAFETY: PR_SET_TIMERSLACK only affects the calling thread.
    unsafe {
        libc::prctl(libc::PR_SET_TIMERSLACK, 1 as libc::c_ulong, 0, 0, 0);
    }
}

#[cfg(not(target_os = "linux"))]
fn reduce_timer_slack() {}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

pub struct Transport {
    units: Vec<UnitId>,
    nodes: usize,
    inboxes: Vec<Inbox>,
    terminated: Vec<AtomicBool>,
    trackers: Vec<Arc<Tracker>>,
    cost: CostModel,
    epoch: Instant,
    record: bool,
    log: Mutex<Vec<LogEntry>>,
    lanes: Mutex<Vec<Option<mpsc::Sender<Job>>>>,
    lane_threads: Mutex<Vec<JoinHandle<()>>>,
}

impl Transport {
    /// `units` must be indexed by global rank.
    pub fn new(units: Vec<UnitId>, nodes: usize, cost: CostModel, record: bool) -> Result<Transport> {
        for (i, u) in units.iter().enumerate() {
            if u.rank() as usize != i {
                return Err(Error::Config(format!("unit list out of rank order at {i}")));
            }
        }
        let n = units.len();
        let mut lanes = Vec::with_capacity(nodes * nodes);
        let mut lane_threads = Vec::new();
        for from in 0..nodes {
            for to in 0..nodes {
                if from == to {
                    lanes.push(None);
                    continue;
                }
                let (tx, rx) = mpsc::channel();
                let h = std::thread::Builder::new()
                    .name(format!("lane-{from}-{to}"))
                    .spawn(move || lane_main(rx))
                    .map_err(|e| Error::Startup {
                        unit: u32::MAX,
                        reason: format!("delivery lane {from}->{to}: {e}"),
                    })?;
                lanes.push(Some(tx));
                lane_threads.push(h);
            }
        }
        Ok(Transport {
            units,
            nodes,
            inboxes: (0..n).map(|_| Inbox::default()).collect(),
            terminated: (0..n).map(|_| AtomicBool::new(false)).collect(),
            trackers: (0..n).map(|_| Arc::new(Tracker::default())).collect(),
            cost,
            epoch: Instant::now(),
            record,
            log: Mutex::new(Vec::new()),
            lanes: Mutex::new(lanes),
            lane_threads: Mutex::new(lane_threads),
        })
    }

    pub fn cost_model(&self) -> CostModel {
        self.cost
    }

    pub fn now(&self) -> Duration {
        self.epoch.elapsed()
    }

    fn unit(&self, rank: u32) -> Result<UnitId> {
        self.units
            .get(rank as usize)
            .copied()
            .ok_or_else(|| Error::Argument(format!("no such unit {rank}")))
    }

    fn inbox(&self, u: UnitId) -> &Inbox {
        &self.inboxes[u.rank() as usize]
    }

    fn is_terminated(&self, u: UnitId) -> bool {
        self.terminated[u.rank() as usize].load(Ordering::Acquire)
    }

    /// Enqueues `msg` on the `(src, dst)` FIFO. Never blocks.
    pub fn send_ctrl(&self, msg: CtrlMessage) -> Result<()> {
        self.post_ctrl(msg).map(drop)
    }

    /// Like [`Transport::send_ctrl`], returning whether the receiver was
    /// parked waiting for a message and has been woken.
    pub fn post_ctrl(&self, msg: CtrlMessage) -> Result<bool> {
        self.unit(msg.src.rank())?;
        self.unit(msg.dst.rank())?;
        if self.is_terminated(msg.dst) {
            return Err(Error::ChannelClosed {
                src: msg.src.rank(),
                dst: msg.dst.rank(),
            });
        }
        if self.record {
            self.push_log(
                LogKind::Ctrl,
                msg.src.rank(),
                msg.dst.rank(),
                msg.tag.as_str().to_string(),
                msg.payload.len(),
            );
        }
        let inbox = self.inbox(msg.dst);
        let mut st = lock(&inbox.state);
        st.queues.entry(msg.src.rank()).or_default().push_back(msg);
        let wake = st.waiting > 0;
        drop(st);
        if wake {
            inbox.cv.notify_all();
        }
        Ok(wake)
    }

    /// Header of the next message `me` would receive, without consuming it.
    /// Sources are visited round-robin starting after the last one received
    /// from, so no sender can starve another.
    pub fn iprobe(&self, me: UnitId) -> Option<Header> {
        let st = lock(&self.inbox(me).state);
        st.front().map(|m| Header {
            src: m.src,
            tag: m.tag,
        })
    }

    /// Removes and returns the oldest message from `src` carrying `tag`,
    /// blocking until one arrives. Earlier messages with other tags stay
    /// queued in order.
    pub fn recv_ctrl(&self, me: UnitId, src: UnitId, tag: Tag) -> Result<CtrlMessage> {
        self.unit(src.rank())?;
        let inbox = self.inbox(me);
        let mut st = lock(&inbox.state);
        loop {
            if let Some(q) = st.queues.get_mut(&src.rank()) {
                if let Some(pos) = q.iter().position(|m| m.tag == tag) {
                    let msg = q.remove(pos).expect("position is in range");
                    st.cursor = src.rank().wrapping_add(1);
                    return Ok(msg);
                }
            }
            if self.is_terminated(src) {
                return Err(Error::ChannelClosed {
                    src: src.rank(),
                    dst: me.rank(),
                });
            }
            st.waiting += 1;
            st = inbox.cv.wait(st).unwrap_or_else(|e| e.into_inner());
            st.waiting -= 1;
        }
    }

    /// Parks `me` until a message arrives or `timeout` elapses. Returns
    /// whether anything is queued.
    pub fn wait_message(&self, me: UnitId, timeout: Duration) -> bool {
        let inbox = self.inbox(me);
        let mut st = lock(&inbox.state);
        if st.has_any() {
            return true;
        }
        st.waiting += 1;
        st = inbox
            .cv
            .wait_timeout(st, timeout)
            .unwrap_or_else(|e| e.into_inner())
            .0;
        st.waiting -= 1;
        st.has_any()
    }

    /// Marks `me` as terminated: later sends to it fail, and receivers
    /// blocked on it with nothing queued give up.
    pub fn close(&self, me: UnitId) {
        self.terminated[me.rank() as usize].store(true, Ordering::Release);
        for inbox in &self.inboxes {
            let st = lock(&inbox.state);
            let wake = st.waiting > 0;
            drop(st);
            if wake {
                inbox.cv.notify_all();
            }
        }
    }

    /// Starts reading `nbytes` from `target` into `into`.
    pub fn rma_read(
        &self,
        accessor: UnitId,
        target: &LocalView,
        into: &DirectView,
        nbytes: usize,
    ) -> Result<TransferToken> {
        check_len(target.len(), nbytes, target.unit(), target.segid())?;
        check_len(into.len(), nbytes, into.unit(), into.segid())?;
        match target {
            LocalView::Direct(src) => {
                into.copy_from(src, nbytes);
                Ok(self.immediate(accessor, src.unit(), src.segid(), nbytes))
            }
            LocalView::Remote(r) => Ok(self.enqueue(
                accessor,
                r.unit,
                r.segid,
                nbytes,
                Payload::Read {
                    src: r.portion.clone(),
                    src_off: r.offset,
                },
                into.portion.clone(),
                into.offset,
            )),
        }
    }

    /// Starts writing `nbytes` of `from` into `target`. The source bytes are
    /// captured at issue time.
    pub fn rma_write(
        &self,
        accessor: UnitId,
        from: &DirectView,
        target: &LocalView,
        nbytes: usize,
    ) -> Result<TransferToken> {
        check_len(from.len(), nbytes, from.unit(), from.segid())?;
        match target {
            LocalView::Direct(dst) => {
                check_len(dst.len(), nbytes, dst.unit(), dst.segid())?;
                dst.copy_from(from, nbytes);
                Ok(self.immediate(accessor, dst.unit(), dst.segid(), nbytes))
            }
            LocalView::Remote(_) => {
                let data = from.subview(0, nbytes)?.read();
                self.rma_write_bytes(accessor, &data, target)
            }
        }
    }

    /// Like [`rma_write`](Self::rma_write) with the source given as bytes.
    pub fn rma_write_bytes(
        &self,
        accessor: UnitId,
        data: &[u8],
        target: &LocalView,
    ) -> Result<TransferToken> {
        let nbytes = data.len();
        check_len(target.len(), nbytes, target.unit(), target.segid())?;
        match target {
            LocalView::Direct(dst) => {
                dst.write(data)?;
                Ok(self.immediate(accessor, dst.unit(), dst.segid(), nbytes))
            }
            LocalView::Remote(r) => Ok(self.enqueue(
                accessor,
                r.unit,
                r.segid,
                nbytes,
                Payload::Write {
                    data: data.to_vec(),
                },
                r.portion.clone(),
                r.offset,
            )),
        }
    }

    fn immediate(&self, accessor: UnitId, dest: UnitId, segid: u32, bytes: usize) -> TransferToken {
        let t = self.now();
        if self.record {
            self.push_log(LogKind::Xfer, accessor.rank(), dest.rank(), segid.to_string(), bytes);
        }
        TransferToken {
            accessor,
            dest,
            segid,
            bytes,
            inter_node: false,
            issue_time: t,
            complete_time: t,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn enqueue(
        &self,
        accessor: UnitId,
        dest: UnitId,
        segid: u32,
        bytes: usize,
        payload: Payload,
        dst: Arc<Portion>,
        dst_off: usize,
    ) -> TransferToken {
        let issued = Instant::now();
        let delay = self.cost.delay(bytes);
        let key = (dest.rank(), segid);
        let tracker = self.trackers[accessor.rank() as usize].clone();
        tracker.add(key);
        let job = Job {
            due: issued + delay,
            payload,
            dst,
            dst_off,
            n: bytes,
            tracker,
            key,
        };
        let lane = accessor.node() as usize * self.nodes + dest.node() as usize;
        let rejected = match &lock(&self.lanes)[lane] {
            Some(tx) => tx.send(job).err().map(|e| e.0),
            None => Some(job),
        };
        if let Some(job) = rejected {
            // Lanes are gone after shutdown; land synchronously.
            job.land();
        }
        let issue_time = issued.duration_since(self.epoch);
        if self.record {
            self.push_log(LogKind::Xfer, accessor.rank(), dest.rank(), segid.to_string(), bytes);
        }
        TransferToken {
            accessor,
            dest,
            segid,
            bytes,
            inter_node: true,
            issue_time,
            complete_time: issue_time + delay,
        }
    }

    /// Blocks until every transfer `accessor` issued toward `(dest, segid)`
    /// has landed.
    pub fn flush(&self, accessor: UnitId, dest: UnitId, segid: u32) {
        self.trackers[accessor.rank() as usize].wait_zero((dest.rank(), segid));
        if self.record {
            self.push_log(LogKind::Flush, accessor.rank(), dest.rank(), segid.to_string(), 0);
        }
    }

    /// Inter-node transfers issued by `accessor` that have not landed yet.
    pub fn outstanding(&self, accessor: UnitId) -> usize {
        self.trackers[accessor.rank() as usize].outstanding()
    }

    pub fn log_error(&self, unit: UnitId, peer: UnitId, text: &str) {
        // errors are always recorded
        self.push_log(
            LogKind::Error,
            unit.rank(),
            peer.rank(),
            text.replace(['\t', '\n'], " "),
            0,
        );
    }

    fn push_log(&self, kind: LogKind, src: u32, dst: u32, what: String, bytes: usize) {
        let mut log = lock(&self.log);
        log.push(LogEntry {
            time: self.epoch.elapsed(),
            kind,
            src,
            dst,
            what,
            bytes,
        });
    }

    pub fn transcript(&self) -> Vec<LogEntry> {
        lock(&self.log).clone()
    }

    /// Tab-separated transcript: time_us, kind, src, dst, tag/segid, bytes.
    pub fn transcript_text(&self) -> String {
        let log = lock(&self.log);
        let mut out = String::new();
        for e in log.iter() {
            out.push_str(&e.to_string());
            out.push('\n');
        }
        out
    }

    pub fn clear_transcript(&self) {
        lock(&self.log).clear();
    }

    /// Stops the delivery lanes after they land everything queued.
    pub fn shutdown(&self) {
        lock(&self.lanes).iter_mut().for_each(|l| *l = None);
        let threads = std::mem::take(&mut *lock(&self.lane_threads));
        for t in threads {
            let _ = t.join();
        }
    }
}

impl Drop for Transport {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn check_len(have: usize, want: usize, unit: UnitId, segid: u32) -> Result<()> {
    if want > have {
        return Err(Error::Bounds {
            unit: unit.rank(),
            segid,
            offset: 0,
            len: want,
            size: have,
        });
    }
    Ok(())
}
