//! Global memory: the per-unit reserved region (segment id 0) and collectively
//! allocated team segments (segment ids 1, 2, ...).
//!
//! Every application unit owns one [`Portion`] per segment. Progress agents
//! take part in every collective allocation with a zero-byte portion, so the
//! segment table always lists them, but nothing is ever stored on their side.
//!
//! Locality is decided at resolution time: an accessor on the same node as
//! the target gets a [`DirectView`] into the target's bytes, anyone else gets
//! a [`RemoteDescriptor`] that only the transport can act on.

use std::alloc::{self, Layout};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::{self, Write as _};
use std::ptr::NonNull;
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::runtime::{Team, Topology, UnitId};

/// Base alignment of every collective segment portion.
pub const SEGMENT_ALIGN: usize = 64;
/// Granularity of the reserved-region allocator.
pub const REGION_GRANULE: usize = 8;

/// Locality-aware reference to remote data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GlobalPtr {
    pub unit: UnitId,
    /// 0 for the reserved region, otherwise a collective segment.
    pub segid: u32,
    /// Team index owning the allocation (meaningful when `segid >= 1`).
    pub index: u32,
    pub offset: usize,
}

impl GlobalPtr {
    /// Same segment, `bytes` further in.
    pub fn add(self, bytes: usize) -> GlobalPtr {
        GlobalPtr {
            offset: self.offset + bytes,
            ..self
        }
    }

    /// The same segment offset on another unit.
    pub fn on(self, unit: UnitId) -> GlobalPtr {
        GlobalPtr { unit, ..self }
    }
}

impl fmt::Display for GlobalPtr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:seg{}/team{}+{}",
            self.unit, self.segid, self.index, self.offset
        )
    }
}

#[repr(C, align(64))]
struct Align64([u8; 64]);

/// Zero-initialised byte buffer whose base is 64-byte aligned.
pub(crate) struct AlignedBuf {
    ptr: NonNull<u8>,
    len: usize,
}

// SAFETY: AlignedBuf uniquely owns its allocation; all shared access goes
// through the RwLock in Portion.
unsafe impl Send for AlignedBuf {}
unsafe impl Sync for AlignedBuf {}

impl AlignedBuf {
    fn zeroed(len: usize) -> AlignedBuf {
        if len == 0 {
            return AlignedBuf {
                ptr: NonNull::<Align64>::dangling().cast(),
                len,
            };
        }
        let layout = Self::layout(len);
        // SAFETY: layout has non-zero size.
        let raw = unsafe { alloc::alloc_zeroed(layout) };
        let ptr = NonNull::new(raw).unwrap_or_else(|| alloc::handle_alloc_error(layout));
        AlignedBuf { ptr, len }
    }

    fn layout(len: usize) -> Layout {
        Layout::from_size_align(len, SEGMENT_ALIGN).expect("segment size overflows layout")
    }

    fn as_slice(&self) -> &[u8] {
        // SAFETY: ptr is valid for len initialised bytes (zeroed at allocation).
        unsafe { std::slice::from_raw_parts(self.ptr.as_ptr(), self.len) }
    }

    fn as_mut_slice(&mut self) -> &mut [u8] {
        // SAFETY: as above, and &mut self guarantees exclusivity.
        unsafe { std::slice::from_raw_parts_mut(self.ptr.as_ptr(), self.len) }
    }
}

impl Drop for AlignedBuf {
    fn drop(&mut self) {
        if self.len > 0 {
            // SAFETY: allocated in `zeroed` with the same layout.
            unsafe { alloc::dealloc(self.ptr.as_ptr(), Self::layout(self.len)) }
        }
    }
}

/// One unit's share of a segment.
pub(crate) struct Portion {
    pub(crate) owner: UnitId,
    pub(crate) segid: u32,
    len: usize,
    base: usize,
    bytes: RwLock<AlignedBuf>,
}

impl Portion {
    pub(crate) fn new(owner: UnitId, segid: u32, len: usize) -> Arc<Portion> {
        let buf = AlignedBuf::zeroed(len);
        Arc::new(Portion {
            owner,
            segid,
            len,
            base: buf.ptr.as_ptr() as usize,
            bytes: RwLock::new(buf),
        })
    }

    pub(crate) fn len(&self) -> usize {
        self.len
    }

    fn read_at(&self, offset: usize, out: &mut [u8]) {
        let guard = self.bytes.read().unwrap_or_else(|e| e.into_inner());
        out.copy_from_slice(&guard.as_slice()[offset..offset + out.len()]);
    }

    fn write_at(&self, offset: usize, data: &[u8]) {
        let mut guard = self.bytes.write().unwrap_or_else(|e| e.into_inner());
        guard.as_mut_slice()[offset..offset + data.len()].copy_from_slice(data);
    }
}

/// Copies `n` bytes between two portions. Locks are taken in address order
/// so concurrent copies in opposite directions cannot deadlock.
pub(crate) fn copy_between(
    src: &Arc<Portion>,
    src_off: usize,
    dst: &Arc<Portion>,
    dst_off: usize,
    n: usize,
) {
    if Arc::ptr_eq(src, dst) {
        let mut g = dst.bytes.write().unwrap_or_else(|e| e.into_inner());
        g.as_mut_slice().copy_within(src_off..src_off + n, dst_off);
        return;
    }
    let src_first = Arc::as_ptr(src) < Arc::as_ptr(dst);
    let (s, mut d);
    if src_first {
        s = src.bytes.read().unwrap_or_else(|e| e.into_inner());
        d = dst.bytes.write().unwrap_or_else(|e| e.into_inner());
    } else {
        d = dst.bytes.write().unwrap_or_else(|e| e.into_inner());
        s = src.bytes.read().unwrap_or_else(|e| e.into_inner());
    }
    d.as_mut_slice()[dst_off..dst_off + n].copy_from_slice(&s.as_slice()[src_off..src_off + n]);
}

/// A same-node window onto `len` bytes of some unit's segment portion.
#[derive(Clone)]
pub struct DirectView {
    pub(crate) portion: Arc<Portion>,
    pub(crate) offset: usize,
    pub(crate) len: usize,
}

impl DirectView {
    pub fn unit(&self) -> UnitId {
        self.portion.owner
    }

    pub fn segid(&self) -> u32 {
        self.portion.segid
    }

    pub fn offset(&self) -> usize {
        self.offset
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Address of the first byte of the view inside the shared store.
    pub fn addr(&self) -> usize {
        self.portion.base + self.offset
    }

    /// Address of the owning portion's base.
    pub fn base_addr(&self) -> usize {
        self.portion.base
    }

    pub fn read(&self) -> Vec<u8> {
        let mut out = vec![0; self.len];
        self.portion.read_at(self.offset, &mut out);
        out
    }

    pub fn read_into(&self, out: &mut [u8]) -> Result<()> {
        self.check_len(out.len())?;
        self.portion.read_at(self.offset, out);
        Ok(())
    }

    /// Writes `data` at the start of the view.
    pub fn write(&self, data: &[u8]) -> Result<()> {
        self.check_len(data.len())?;
        self.portion.write_at(self.offset, data);
        Ok(())
    }

    /// Narrows the view to `[at, at + len)` relative to its start.
    pub fn subview(&self, at: usize, len: usize) -> Result<DirectView> {
        if at.checked_add(len).map_or(true, |end| end > self.len) {
            return Err(self.bounds(at, len));
        }
        Ok(DirectView {
            portion: self.portion.clone(),
            offset: self.offset + at,
            len,
        })
    }

    pub(crate) fn copy_from(&self, src: &DirectView, n: usize) {
        copy_between(&src.portion, src.offset, &self.portion, self.offset, n);
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n > self.len {
            return Err(self.bounds(0, n));
        }
        Ok(())
    }

    fn bounds(&self, at: usize, len: usize) -> Error {
        Error::Bounds {
            unit: self.portion.owner.rank(),
            segid: self.portion.segid,
            offset: self.offset + at,
            len,
            size: self.portion.len,
        }
    }
}

impl fmt::Debug for DirectView {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DirectView")
            .field("unit", &self.portion.owner)
            .field("segid", &self.portion.segid)
            .field("offset", &self.offset)
            .field("len", &self.len)
            .finish()
    }
}

/// A cross-node target usable only by the transport.
#[derive(Clone)]
pub struct RemoteDescriptor {
    pub unit: UnitId,
    pub segid: u32,
    pub offset: usize,
    pub len: usize,
    pub(crate) portion: Arc<Portion>,
}

impl fmt::Debug for RemoteDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RemoteDescriptor")
            .field("unit", &self.unit)
            .field("segid", &self.segid)
            .field("offset", &self.offset)
            .field("len", &self.len)
            .finish()
    }
}

#[derive(Debug, Clone)]
pub enum LocalView {
    Direct(DirectView),
    Remote(RemoteDescriptor),
}

impl LocalView {
    pub fn unit(&self) -> UnitId {
        match self {
            LocalView::Direct(v) => v.unit(),
            LocalView::Remote(r) => r.unit,
        }
    }

    pub fn segid(&self) -> u32 {
        match self {
            LocalView::Direct(v) => v.segid(),
            LocalView::Remote(r) => r.segid,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            LocalView::Direct(v) => v.len,
            LocalView::Remote(r) => r.len,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_direct(&self) -> bool {
        matches!(self, LocalView::Direct(_))
    }

    pub fn direct(self) -> Option<DirectView> {
        match self {
            LocalView::Direct(v) => Some(v),
            LocalView::Remote(_) => None,
        }
    }
}

/// First-fit allocator over one unit's reserved region. Freed blocks are
/// merged with adjacent free neighbours.
#[derive(Debug)]
pub(crate) struct RegionAllocator {
    size: usize,
    free: BTreeMap<usize, usize>,
    used: BTreeMap<usize, usize>,
}

impl RegionAllocator {
    pub(crate) fn new(size: usize) -> RegionAllocator {
        let mut free = BTreeMap::new();
        if size > 0 {
            free.insert(0, size);
        }
        RegionAllocator {
            size,
            free,
            used: BTreeMap::new(),
        }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.free.values().sum()
    }

    pub(crate) fn alloc(&mut self, nbytes: usize) -> Option<usize> {
        if nbytes == 0 {
            return None;
        }
        let need = nbytes.checked_next_multiple_of(REGION_GRANULE)?;
        let (&at, &len) = self.free.iter().find(|(_, &len)| len >= need)?;
        self.free.remove(&at);
        if len > need {
            self.free.insert(at + need, len - need);
        }
        self.used.insert(at, need);
        Some(at)
    }

    pub(crate) fn release(&mut self, at: usize) -> bool {
        let Some(used) = self.used.remove(&at) else {
            return false;
        };
        let (mut start, mut len) = (at, used);
        if let Some(next_len) = self.free.remove(&(at + used)) {
            len += next_len;
        }
        if let Some((&prev, &plen)) = self.free.range(..at).next_back() {
            if prev + plen == at {
                self.free.remove(&prev);
                start = prev;
                len += plen;
            }
        }
        self.free.insert(start, len);
        debug_assert!(self.free.values().sum::<usize>() <= self.size);
        true
    }
}

/// Bookkeeping for one collective segment.
pub(crate) struct SegmentRecord {
    pub(crate) segid: u32,
    pub(crate) index: u32,
    pub(crate) size_per_unit: usize,
    pub(crate) bases: BTreeMap<UnitId, Arc<Portion>>,
    pub(crate) epoch_open: bool,
}

/// Read-only snapshot of a segment record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentInfo {
    pub segid: u32,
    pub index: u32,
    pub size_per_unit: usize,
    /// Bytes contributed by each participant; agents contribute 0.
    pub base_sizes: BTreeMap<UnitId, usize>,
    pub base_addrs: BTreeMap<UnitId, usize>,
    pub epoch_open: bool,
}

struct PendingChange {
    segid: u32,
    expected: BTreeSet<UnitId>,
    joined: BTreeSet<UnitId>,
}

#[derive(Default)]
struct SegmentTable {
    live: BTreeMap<u32, SegmentRecord>,
    retired: BTreeSet<u32>,
    last_segid: u32,
    pending_alloc: HashMap<u32, PendingChange>,
    pending_free: HashMap<u32, PendingChange>,
}

pub(crate) struct Memory {
    regions: Vec<Arc<Portion>>,
    allocators: Vec<Mutex<RegionAllocator>>,
    table: Mutex<SegmentTable>,
    changed: Condvar,
}

impl Memory {
    pub(crate) fn new(topology: &Topology, region_bytes: usize) -> Memory {
        let mut regions = Vec::with_capacity(topology.units().len());
        let mut allocators = Vec::with_capacity(topology.units().len());
        for &u in topology.units() {
            let size = if u.is_agent() { 0 } else { region_bytes };
            regions.push(Portion::new(u, 0, size));
            allocators.push(Mutex::new(RegionAllocator::new(size)));
        }
        Memory {
            regions,
            allocators,
            table: Mutex::new(SegmentTable::default()),
            changed: Condvar::new(),
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, SegmentTable> {
        self.table.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub(crate) fn local_alloc(&self, origin: UnitId, nbytes: usize) -> Result<GlobalPtr> {
        if nbytes == 0 {
            return Err(Error::Argument("allocation size must be positive".into()));
        }
        let mut a = self.allocators[origin.rank() as usize]
            .lock()
            .unwrap_or_else(|e| e.into_inner());
        let offset = a.alloc(nbytes).ok_or_else(|| Error::Alloc {
            unit: origin.rank(),
            requested: nbytes,
            remaining: a.remaining(),
        })?;
        Ok(GlobalPtr {
            unit: origin,
            segid: 0,
            index: 0,
            offset,
        })
    }

    pub(crate) fn local_free(&self, gptr: GlobalPtr) -> Result<()> {
        if gptr.segid != 0 {
            return Err(Error::Argument(format!("{gptr} is not in the reserved region")));
        }
        let mut a = self.allocators[gptr.unit.rank() as usize]
            .lock()
            .unwrap_or_else(|e| e.into_inner());
        if !a.release(gptr.offset) {
            return Err(Error::Argument(format!("{gptr} was not allocated")));
        }
        Ok(())
    }

    /// Resolves `[gptr.offset, gptr.offset + len)` for `accessor`.
    pub(crate) fn resolve(&self, gptr: GlobalPtr, accessor: UnitId, len: usize) -> Result<LocalView> {
        let portion = if gptr.segid == 0 {
            self.regions
                .get(gptr.unit.rank() as usize)
                .cloned()
                .ok_or_else(|| Error::Argument(format!("no such unit {}", gptr.unit)))?
        } else {
            let table = self.lock();
            let rec = table
                .live
                .get(&gptr.segid)
                .filter(|r| r.index == gptr.index && r.epoch_open)
                .ok_or(Error::StaleSegment { segid: gptr.segid })?;
            rec.bases.get(&gptr.unit).cloned().ok_or_else(|| {
                Error::Argument(format!(
                    "{} does not participate in segment {}",
                    gptr.unit, gptr.segid
                ))
            })?
        };
        let size = portion.len();
        if gptr.offset >= size || gptr.offset.checked_add(len).map_or(true, |e| e > size) {
            return Err(Error::Bounds {
                unit: gptr.unit.rank(),
                segid: gptr.segid,
                offset: gptr.offset,
                len,
                size,
            });
        }
        Ok(if accessor.node() == gptr.unit.node() {
            LocalView::Direct(DirectView {
                portion,
                offset: gptr.offset,
                len,
            })
        } else {
            LocalView::Remote(RemoteDescriptor {
                unit: gptr.unit,
                segid: gptr.segid,
                offset: gptr.offset,
                len,
                portion,
            })
        })
    }

    /// Creates the member portions of a new segment and registers the agents
    /// that still have to join. Runs once per collective call.
    pub(crate) fn begin_alloc(
        &self,
        team: &Team,
        nbytes_per_unit: usize,
        topology: &Topology,
    ) -> Result<u32> {
        let mut table = self.lock();
        if table.pending_alloc.contains_key(&team.index()) {
            return Err(Error::Usage(format!(
                "team {} already has an allocation in progress",
                team.index()
            )));
        }
        let segid = table.last_segid + 1;
        table.last_segid = segid;
        let mut bases = BTreeMap::new();
        for &m in team.members() {
            bases.insert(m, Portion::new(m, segid, nbytes_per_unit));
        }
        let expected = agents_of_nodes(team, topology);
        let ready = expected.is_empty();
        table.live.insert(
            segid,
            SegmentRecord {
                segid,
                index: team.index(),
                size_per_unit: nbytes_per_unit,
                bases,
                epoch_open: ready,
            },
        );
        if !ready {
            table.pending_alloc.insert(
                team.index(),
                PendingChange {
                    segid,
                    expected,
                    joined: BTreeSet::new(),
                },
            );
        }
        Ok(segid)
    }

    /// An agent joins the pending allocation of team `index` with a 0-byte
    /// portion. The epoch opens once every expected agent has joined.
    pub(crate) fn agent_join_alloc(&self, agent: UnitId, index: u32) -> Result<u32> {
        let mut table = self.lock();
        let pending = table
            .pending_alloc
            .get_mut(&index)
            .ok_or_else(|| Error::Protocol(format!("ALLOC for unknown team index {index}")))?;
        if !pending.expected.contains(&agent) {
            return Err(Error::Protocol(format!(
                "{agent} was not expected to join allocation for team {index}"
            )));
        }
        pending.joined.insert(agent);
        let segid = pending.segid;
        let done = pending.joined == pending.expected;
        if done {
            table.pending_alloc.remove(&index);
        }
        let rec = table
            .live
            .get_mut(&segid)
            .ok_or(Error::StaleSegment { segid })?;
        rec.bases.insert(agent, Portion::new(agent, segid, 0));
        if done {
            rec.epoch_open = true;
        }
        drop(table);
        self.changed.notify_all();
        Ok(segid)
    }

    pub(crate) fn wait_live(&self, segid: u32, timeout: Duration) -> Result<()> {
        let deadline = Instant::now() + timeout;
        let mut table = self.lock();
        loop {
            match table.live.get(&segid) {
                Some(r) if r.epoch_open => return Ok(()),
                Some(_) => {}
                None => return Err(Error::StaleSegment { segid }),
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(Error::Timeout(format!(
                    "progress agents did not join segment {segid}"
                )));
            }
            table = self
                .changed
                .wait_timeout(table, deadline - now)
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
    }

    pub(crate) fn check_live(&self, segid: u32, index: u32) -> Result<()> {
        let table = self.lock();
        match table.live.get(&segid) {
            Some(r) if r.index == index && r.epoch_open => Ok(()),
            _ => Err(Error::StaleSegment { segid }),
        }
    }

    /// Closes the epoch of `segid` and waits for the agents' FREE acks.
    pub(crate) fn begin_free(&self, segid: u32, index: u32, topology: &Topology) -> Result<u32> {
        let mut table = self.lock();
        let rec = table
            .live
            .get_mut(&segid)
            .filter(|r| r.index == index && r.epoch_open)
            .ok_or(Error::StaleSegment { segid })?;
        rec.epoch_open = false;
        let expected: BTreeSet<UnitId> = rec.bases.keys().copied().filter(|u| u.is_agent()).collect();
        let _ = topology;
        if expected.is_empty() {
            table.live.remove(&segid);
            table.retired.insert(segid);
        } else {
            table.pending_free.insert(
                index,
                PendingChange {
                    segid,
                    expected,
                    joined: BTreeSet::new(),
                },
            );
        }
        Ok(segid)
    }

    pub(crate) fn agent_ack_free(&self, agent: UnitId, index: u32) -> Result<u32> {
        let mut table = self.lock();
        let pending = table
            .pending_free
            .get_mut(&index)
            .ok_or_else(|| Error::Protocol(format!("FREE for unknown team index {index}")))?;
        if !pending.expected.contains(&agent) {
            return Err(Error::Protocol(format!(
                "{agent} does not hold a base in the segment freed for team {index}"
            )));
        }
        pending.joined.insert(agent);
        let segid = pending.segid;
        let done = pending.joined == pending.expected;
        if let Some(rec) = table.live.get_mut(&segid) {
            rec.bases.remove(&agent);
        }
        if done {
            table.pending_free.remove(&index);
            table.live.remove(&segid);
            table.retired.insert(segid);
        }
        drop(table);
        self.changed.notify_all();
        Ok(segid)
    }

    pub(crate) fn wait_retired(&self, segid: u32, timeout: Duration) -> Result<()> {
        let deadline = Instant::now() + timeout;
        let mut table = self.lock();
        while !table.retired.contains(&segid) {
            let now = Instant::now();
            if now >= deadline {
                return Err(Error::Timeout(format!(
                    "progress agents did not release segment {segid}"
                )));
            }
            table = self
                .changed
                .wait_timeout(table, deadline - now)
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
        Ok(())
    }

    pub(crate) fn segment(&self, segid: u32) -> Option<SegmentInfo> {
        let table = self.lock();
        table.live.get(&segid).map(info)
    }

    pub(crate) fn segments(&self) -> Vec<SegmentInfo> {
        self.lock().live.values().map(info).collect()
    }

    pub(crate) fn last_segid(&self) -> u32 {
        self.lock().last_segid
    }

    pub(crate) fn region_remaining(&self, unit: UnitId) -> usize {
        self.allocators[unit.rank() as usize]
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .remaining()
    }

    pub(crate) fn dump(&self) -> String {
        let table = self.lock();
        let mut out = String::new();
        for rec in table.live.values() {
            let _ = writeln!(
                out,
                "segid={} index={} size_per_unit={} epoch_open={}",
                rec.segid, rec.index, rec.size_per_unit, rec.epoch_open
            );
            for (u, p) in &rec.bases {
                let _ = writeln!(out, "  {u}\tbase=0x{:x}\tbytes={}", p.base, p.len());
            }
        }
        if !table.retired.is_empty() {
            let ids: Vec<String> = table.retired.iter().map(u32::to_string).collect();
            let _ = writeln!(out, "retired: {}", ids.join(","));
        }
        out
    }
}

fn info(rec: &SegmentRecord) -> SegmentInfo {
    SegmentInfo {
        segid: rec.segid,
        index: rec.index,
        size_per_unit: rec.size_per_unit,
        base_sizes: rec.bases.iter().map(|(u, p)| (*u, p.len())).collect(),
        base_addrs: rec.bases.iter().map(|(u, p)| (*u, p.base)).collect(),
        epoch_open: rec.epoch_open,
    }
}

/// Every agent on a node that hosts at least one member of `team`.
pub(crate) fn agents_of_nodes(team: &Team, topology: &Topology) -> BTreeSet<UnitId> {
    let nodes: BTreeSet<u32> = team.members().iter().map(|m| m.node()).collect();
    nodes
        .into_iter()
        .flat_map(|n| topology.agents_on(n).iter().copied())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_fit_offsets() {
        let mut a = RegionAllocator::new(256);
        assert_eq!(a.alloc(64), Some(0));
        assert_eq!(a.alloc(64), Some(64));
        assert_eq!(a.alloc(3), Some(128));
        // 3 bytes occupy one 8-byte granule
        assert_eq!(a.alloc(8), Some(136));
        assert_eq!(a.remaining(), 256 - 144);
    }

    #[test]
    fn exhaustion_and_reuse() {
        let mut a = RegionAllocator::new(128);
        assert_eq!(a.alloc(129), None);
        let x = a.alloc(64).unwrap();
        let y = a.alloc(64).unwrap();
        assert_eq!(a.alloc(8), None);
        assert!(a.release(x));
        assert!(!a.release(x));
        assert_eq!(a.alloc(64), Some(0));
        assert!(a.release(y));
        assert!(a.release(0));
        // both halves merged back into one block
        assert_eq!(a.alloc(128), Some(0));
    }

    #[test]
    fn release_merges_right_neighbour() {
        let mut a = RegionAllocator::new(96);
        let x = a.alloc(32).unwrap();
        let y = a.alloc(32).unwrap();
        let z = a.alloc(32).unwrap();
        assert!(a.release(z));
        assert!(a.release(y));
        assert_eq!(a.free.len(), 1);
        assert!(a.release(x));
        assert_eq!(a.free.get(&0), Some(&96));
    }

    #[test]
    fn aligned_buffers() {
        for len in [0usize, 1, 63, 64, 1000] {
            let p = Portion::new(UnitId::new(0, 0, crate::Role::Application), 1, len);
            assert_eq!(p.base % SEGMENT_ALIGN, 0);
            assert_eq!(p.len(), len);
        }
    }

    #[test]
    fn copy_between_same_and_distinct_portions() {
        let u = UnitId::new(0, 0, crate::Role::Application);
        let a = Portion::new(u, 1, 32);
        let b = Portion::new(u, 1, 32);
        a.write_at(0, &[1, 2, 3, 4]);
        copy_between(&a, 0, &a, 8, 4);
        copy_between(&a, 8, &b, 28, 4);
        let mut out = [0u8; 4];
        b.read_at(28, &mut out);
        assert_eq!(out, [1, 2, 3, 4]);
    }

    proptest::proptest! {
        #[test]
        fn allocator_blocks_stay_disjoint_and_coalesce(
            ops in proptest::collection::vec((proptest::bool::ANY, 1usize..300, 0usize..64), 1..200)
        ) {
            let size = 4096;
            let mut a = RegionAllocator::new(size);
            let mut live: Vec<(usize, usize)> = Vec::new();
            for (is_alloc, n, pick) in ops {
                if is_alloc || live.is_empty() {
                    if let Some(at) = a.alloc(n) {
                        let len = n.next_multiple_of(REGION_GRANULE);
                        proptest::prop_assert!(at + len <= size);
                        proptest::prop_assert!(live.iter().all(|&(o, l)| at + len <= o || o + l <= at));
                        live.push((at, len));
                    } else {
                        // first fit fails only if no free block is large enough
                        let need = n.next_multiple_of(REGION_GRANULE);
                        proptest::prop_assert!(a.free.values().all(|&l| l < need));
                    }
                } else {
                    let (at, _) = live.swap_remove(pick % live.len());
                    proptest::prop_assert!(a.release(at));
                }
                let used: usize = live.iter().map(|b| b.1).sum();
                proptest::prop_assert_eq!(a.remaining(), size - used);
                // no two free blocks touch
                let blocks: Vec<_> = a.free.iter().collect();
                proptest::prop_assert!(blocks.windows(2).all(|w| w[0].0 + w[0].1 < *w[1].0));
            }
            for (at, _) in live {
                proptest::prop_assert!(a.release(at));
            }
            proptest::prop_assert_eq!(a.free.len(), 1);
            proptest::prop_assert_eq!(a.remaining(), size);
        }
    }
}
