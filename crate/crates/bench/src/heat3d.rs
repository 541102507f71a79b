//! Explicit 3D heat conduction with halo exchange over non-blocking gets.
//!
//! The field lives on a `nx x ny x nz` cell grid with fixed-temperature
//! (Dirichlet) faces. Each step applies the conservative 7-point update
//!
//! `T' = T + dt/dx^2 * sum_nb kf(T, T_nb) * (T_nb - T)`,
//! `kf(a, b) = (k(a) + k(b)) / 2`
//!
//! where `k` is either constant or linear in temperature. The six neighbour
//! terms are summed as `(-x + +x) + (-y + +y) + (-z + +z)`, so the result of
//! a cell depends only on its own and its neighbours' values, never on who
//! computes it; the distributed run is therefore bitwise identical to the
//! serial reference.
//!
//! The distributed run partitions the grid into blocks, one per application
//! unit (checkerboard decomposition). Every unit publishes its six boundary
//! layers into a double-buffered area of a collective segment; each step it
//! posts gets for its neighbours' layers, updates the cells that need no halo,
//! waits, unpacks the halos, updates its outer shell, publishes, and joins a
//! barrier.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::RangeInclusive;
use std::str::FromStr;
use std::time::{Duration, Instant};

use asyncrma::{AgentMetrics, Config, GlobalPtr, Handle, ProgressMode, Runtime, Unit, UnitId};
use serde::{Deserialize, Serialize};

use crate::cputime::thread_cpu;
use crate::{BenchError, Result};

/// Thermal diffusivity as a function of temperature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Diffusivity {
    Constant(f64),
    /// `k0 * (1 + alpha * T)`
    Linear { k0: f64, alpha: f64 },
}

impl Diffusivity {
    #[inline(always)]
    pub fn at(&self, t: f64) -> f64 {
        match *self {
            Diffusivity::Constant(k) => k,
            Diffusivity::Linear { k0, alpha } => k0 * (1.0 + alpha * t),
        }
    }

    /// Largest diffusivity for temperatures in `[lo, hi]`.
    pub fn max_over(&self, lo: f64, hi: f64) -> f64 {
        self.at(lo).max(self.at(hi))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Initial {
    Uniform(f64),
    /// Gaussian hot spot of height 1 in the middle of the grid.
    Bump,
}

/// Problem definition shared by the serial and distributed solvers.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatConfig {
    pub grid: [usize; 3],
    /// Blocks along each axis; their product is the number of units.
    pub decomp: [usize; 3],
    pub iters: usize,
    pub kappa: Diffusivity,
    pub dx: f64,
    pub dt: f64,
    /// Face temperatures in the order -x, +x, -y, +y, -z, +z.
    pub boundary: [f64; 6],
    pub initial: Initial,
}

impl HeatConfig {
    /// A heated -x face, a hot spot in the middle, temperature-dependent
    /// diffusivity and a time step at 90 % of the stability limit.
    pub fn new(grid: [usize; 3], units: usize, iters: usize) -> Result<HeatConfig> {
        let decomp = decompose(units, grid)?;
        let mut hc = HeatConfig {
            grid,
            decomp,
            iters,
            kappa: Diffusivity::Linear { k0: 0.1, alpha: 0.5 },
            dx: 1.0,
            dt: 0.0,
            boundary: [1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            initial: Initial::Bump,
        };
        hc.dt = 0.9 * hc.dt_limit();
        Ok(hc)
    }

    pub fn units(&self) -> usize {
        self.decomp.iter().product()
    }

    pub fn block(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.grid[a] / self.decomp[a])
    }

    fn temperature_range(&self) -> (f64, f64) {
        let init = match self.initial {
            Initial::Uniform(t) => (t, t),
            Initial::Bump => (0.0, 1.0),
        };
        self.boundary
            .iter()
            .fold(init, |(lo, hi), &b| (lo.min(b), hi.max(b)))
    }

    /// Largest stable explicit step, `dx^2 / (6 k_max)`.
    pub fn dt_limit(&self) -> f64 {
        let (lo, hi) = self.temperature_range();
        self.dx * self.dx / (6.0 * self.kappa.max_over(lo, hi))
    }

    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if self.grid[a] == 0 || self.decomp[a] == 0 || self.grid[a] % self.decomp[a] != 0 {
                return Err(BenchError::Setup(format!(
                    "grid {} is not divisible by decomposition {}",
                    Grid(self.grid),
                    Grid(self.decomp)
                )));
            }
        }
        if !(self.dt > 0.0 && self.dx > 0.0) {
            return Err(BenchError::Setup("dt and dx must be positive".into()));
        }
        let limit = self.dt_limit();
        if self.dt > limit {
            return Err(BenchError::Numeric(format!(
                "dt = {} exceeds the stability bound dx^2/(6 k_max) = {limit}",
                self.dt
            )));
        }
        Ok(())
    }

    fn initial_value(&self, g: [usize; 3]) -> f64 {
        match self.initial {
            Initial::Uniform(t) => t,
            Initial::Bump => {
                let mut r2 = 0.0;
                for a in 0..3 {
                    let n = self.grid[a] as f64;
                    let d = g[a] as f64 + 0.5 - 0.5 * n;
                    let s = n / 6.0;
                    r2 += d * d / (s * s);
                }
                (-0.5 * r2).exp()
            }
        }
    }

    fn check_finite(&self, field: &[f64]) -> Result<()> {
        if field.iter().all(|t| t.is_finite()) {
            Ok(())
        } else {
            Err(BenchError::Numeric(format!(
                "field became non-finite; dt = {} must satisfy dt <= dx^2/(6 k_max) = {}",
                self.dt,
                self.dt_limit()
            )))
        }
    }
}

/// `AxBxC` formatting and parsing of a triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid(pub [usize; 3]);

impl fmt::Display for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.0[0], self.0[1], self.0[2])
    }
}

impl FromStr for Grid {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split(['x', 'X']).collect();
        let dims: Vec<usize> = match parts.as_slice() {
            [n] => vec![n.parse().map_err(|_| format!("bad grid `{s}`"))?; 3],
            [_, _, _] => parts
                .iter()
                .map(|p| p.parse().map_err(|_| format!("bad grid `{s}`")))
                .collect::<Result<_, _>>()?,
            _ => return Err(format!("grid `{s}` must look like NX x NY x NZ, e.g. 32x32x64")),
        };
        if dims.contains(&0) {
            return Err(format!("grid `{s}` has an empty axis"));
        }
        Ok(Grid([dims[0], dims[1], dims[2]]))
    }
}

/// Factors `units` into blocks along x, y, z that divide the grid, picking
/// the split with the least halo surface.
pub fn decompose(units: usize, grid: [usize; 3]) -> Result<[usize; 3]> {
    let mut best: Option<((usize, usize), [usize; 3])> = None;
    for px in (1..=units).filter(|p| units % p == 0) {
        for py in (1..=units / px).filter(|p| (units / px) % p == 0) {
            let d = [px, py, units / px / py];
            if (0..3).any(|a| grid[a] % d[a] != 0) {
                continue;
            }
            let b = [0, 1, 2].map(|a| grid[a] / d[a]);
            // ties go to the most even split
            let key = (b[0] * b[1] + b[1] * b[2] + b[0] * b[2], *d.iter().max().unwrap());
            if best.map_or(true, |(k, _)| key < k) {
                best = Some((key, d));
            }
        }
    }
    best.map(|(_, d)| d).ok_or_else(|| {
        BenchError::Setup(format!("cannot split grid {} into {units} blocks", Grid(grid)))
    })
}

/// Interior cells plus one ghost layer on every side; x varies fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub n: [usize; 3],
    pub data: Vec<f64>,
}

impl Block {
    pub fn new(n: [usize; 3]) -> Block {
        Block {
            n,
            data: vec![0.0; (n[0] + 2) * (n[1] + 2) * (n[2] + 2)],
        }
    }

    #[inline(always)]
    fn strides(&self) -> [usize; 3] {
        let sx = self.n[0] + 2;
        [1, sx, sx * (self.n[1] + 2)]
    }

    /// Index of padded coordinates (0 and n+1 are ghosts).
    #[inline(always)]
    pub fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        let s = self.strides();
        i + j * s[1] + k * s[2]
    }

    fn plane_len(&self) -> usize {
        self.strides()[2]
    }

    /// Cells of the layer at padded position `layer` along `axis`, the
    /// other two axes enumerated lower axis fastest, ghosts excluded.
    fn layer_cells(&self, axis: usize, layer: usize) -> impl Iterator<Item = usize> + '_ {
        let (a, b) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        let (na, nb) = (self.n[a], self.n[b]);
        (1..=nb).flat_map(move |q| {
            (1..=na).map(move |p| {
                let mut c = [0; 3];
                c[axis] = layer;
                c[a] = p;
                c[b] = q;
                self.idx(c[0], c[1], c[2])
            })
        })
    }

    fn pack(&self, axis: usize, layer: usize, out: &mut Vec<u8>) {
        out.clear();
        for i in self.layer_cells(axis, layer) {
            out.extend_from_slice(&self.data[i].to_le_bytes());
        }
    }

    fn unpack(&mut self, axis: usize, layer: usize, bytes: &[u8]) {
        let idx: Vec<usize> = self.layer_cells(axis, layer).collect();
        for (i, chunk) in idx.into_iter().zip(bytes.chunks_exact(8)) {
            self.data[i] = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
    }

    fn fill_layer(&mut self, axis: usize, layer: usize, value: f64) {
        let idx: Vec<usize> = self.layer_cells(axis, layer).collect();
        for i in idx {
            self.data[i] = value;
        }
    }
}

/// New value of one cell from its own and its six neighbours' values
/// (-x, +x, -y, +y, -z, +z).
#[inline(always)]
pub fn cell_update(t: f64, nb: [f64; 6], kappa: Diffusivity, r: f64) -> f64 {
    let kt = kappa.at(t);
    let flux = |tn: f64| 0.5 * (kt + kappa.at(tn)) * (tn - t);
    t + r * ((flux(nb[0]) + flux(nb[1])) + (flux(nb[2]) + flux(nb[3])) + (flux(nb[4]) + flux(nb[5])))
}

/// Updates the cells of one z-plane `k` for `i in is`, `j in js`.
#[inline(always)]
fn update_rows(
    src: &Block,
    dst_plane: &mut [f64],
    k: usize,
    is: RangeInclusive<usize>,
    js: RangeInclusive<usize>,
    kappa: Diffusivity,
    r: f64,
) {
    let [_, sy, sz] = src.strides();
    let d = &src.data;
    for j in js {
        for i in is.clone() {
            let c = src.idx(i, j, k);
            let nb = [d[c - 1], d[c + 1], d[c - sy], d[c + sy], d[c - sz], d[c + sz]];
            dst_plane[i + j * sy] = cell_update(d[c], nb, kappa, r);
        }
    }
}

/// Updates the box `is x js x ks` (padded coordinates) of `dst` from `src`.
pub fn sweep_box(
    src: &Block,
    dst: &mut Block,
    is: RangeInclusive<usize>,
    js: RangeInclusive<usize>,
    ks: RangeInclusive<usize>,
    kappa: Diffusivity,
    r: f64,
) {
    let plane = src.plane_len();
    for k in ks {
        let p = &mut dst.data[k * plane..(k + 1) * plane];
        update_rows(src, p, k, is.clone(), js.clone(), kappa, r);
    }
}

/// Updates every interior cell, one z-plane at a time on the calling thread.
pub fn sweep_seq(src: &Block, dst: &mut Block, kappa: Diffusivity, r: f64) {
    let n = src.n;
    sweep_box(src, dst, 1..=n[0], 1..=n[1], 1..=n[2], kappa, r);
}

/// Updates every interior cell with z-planes spread over the rayon pool.
#[cfg(feature = "parallel")]
pub fn sweep_par(src: &Block, dst: &mut Block, kappa: Diffusivity, r: f64) {
    use rayon::prelude::*;
    let n = src.n;
    let plane = src.plane_len();
    dst.data
        .par_chunks_mut(plane)
        .enumerate()
        .filter(|(k, _)| (1..=n[2]).contains(k))
        .for_each(|(k, p)| update_rows(src, p, k, 1..=n[0], 1..=n[1], kappa, r));
}

/// Full interior sweep: parallel when the `parallel` feature is enabled.
pub fn sweep(src: &Block, dst: &mut Block, kappa: Diffusivity, r: f64) {
    #[cfg(feature = "parallel")]
    sweep_par(src, dst, kappa, r);
    #[cfg(not(feature = "parallel"))]
    sweep_seq(src, dst, kappa, r);
}

/// Boxes covering the outer shell of an `n` block (padded coordinates).
fn shell_boxes(n: [usize; 3]) -> Vec<[RangeInclusive<usize>; 3]> {
    let [nx, ny, nz] = n;
    let mut v = vec![[1..=nx, 1..=ny, 1..=1]];
    if nz > 1 {
        v.push([1..=nx, 1..=ny, nz..=nz]);
    }
    if nz > 2 {
        let ks = 2..=nz - 1;
        v.push([1..=nx, 1..=1, ks.clone()]);
        if ny > 1 {
            v.push([1..=nx, ny..=ny, ks.clone()]);
        }
        if ny > 2 {
            v.push([1..=1, 2..=ny - 1, ks.clone()]);
            if nx > 1 {
                v.push([nx..=nx, 2..=ny - 1, ks]);
            }
        }
    }
    v
}

fn initial_block(hc: &HeatConfig, n: [usize; 3], origin: [usize; 3]) -> Block {
    let mut b = Block::new(n);
    for k in 1..=n[2] {
        for j in 1..=n[1] {
            for i in 1..=n[0] {
                let g = [origin[0] + i - 1, origin[1] + j - 1, origin[2] + k - 1];
                let at = b.idx(i, j, k);
                b.data[at] = hc.initial_value(g);
            }
        }
    }
    b
}

/// Reference solution: the whole grid on one context.
pub fn serial_oracle(hc: &HeatConfig) -> Result<Vec<f64>> {
    hc.validate()?;
    let r = hc.dt / (hc.dx * hc.dx);
    let n = hc.grid;
    let mut cur = initial_block(hc, n, [0, 0, 0]);
    for f in 0..6 {
        let layer = if f % 2 == 0 { 0 } else { n[f / 2] + 1 };
        cur.fill_layer(f / 2, layer, hc.boundary[f]);
    }
    let mut next = cur.clone();
    for _ in 0..hc.iters {
        sweep(&cur, &mut next, hc.kappa, r);
        std::mem::swap(&mut cur, &mut next);
    }
    let field = interior(&cur);
    hc.check_finite(&field)?;
    Ok(field)
}

fn interior(b: &Block) -> Vec<f64> {
    let mut out = Vec::with_capacity(b.n.iter().product());
    for k in 1..=b.n[2] {
        for j in 1..=b.n[1] {
            let row = b.idx(1, j, k);
            out.extend_from_slice(&b.data[row..row + b.n[0]]);
        }
    }
    out
}

/// FNV-1a over the little-endian bytes of every value, in order.
pub fn checksum(field: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in field {
        for byte in v.to_bits().to_le_bytes() {
            h ^= u64::from(byte);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Outcome of a distributed run.
#[derive(Debug, Clone)]
pub struct HeatResult {
    /// Slowest unit's wall time for all iterations.
    pub total_t_ms: f64,
    /// Mean over units of the time not spent computing: posting, waiting for
    /// and unpacking halos, publishing, synchronizing. Computation is
    /// measured as the unit's own CPU time, so when units share a core the
    /// slices spent running other units count here and not as computation.
    pub comm_t_ms: f64,
    /// Mean over units of computation CPU time / total wall time.
    pub calc_fraction: f64,
    pub checksum: u64,
    pub field: Vec<f64>,
    /// Mean over units of the per-phase breakdown.
    pub phases: Phases,
    pub agent_metrics: BTreeMap<UnitId, AgentMetrics>,
}

struct UnitOut {
    coords: [usize; 3],
    block: Vec<f64>,
    total_ms: f64,
    phases: Phases,
}

/// Time per phase of the step loop, in milliseconds, summed over steps.
/// `calc_cpu_ms` is CPU time of the unit's own thread; every other field is
/// wall time.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Phases {
    pub post_ms: f64,
    pub wait_ms: f64,
    pub publish_ms: f64,
    pub barrier_ms: f64,
    pub calc_wall_ms: f64,
    pub calc_cpu_ms: f64,
}

impl Phases {
    fn mean(all: &[Phases]) -> Phases {
        let n = all.len() as f64;
        let sum = |f: fn(&Phases) -> f64| all.iter().map(f).sum::<f64>() / n;
        Phases {
            post_ms: sum(|p| p.post_ms),
            wait_ms: sum(|p| p.wait_ms),
            publish_ms: sum(|p| p.publish_ms),
            barrier_ms: sum(|p| p.barrier_ms),
            calc_wall_ms: sum(|p| p.calc_wall_ms),
            calc_cpu_ms: sum(|p| p.calc_cpu_ms),
        }
    }
}

/// Byte offsets of the published layers (two parities) and receive areas.
struct Layout {
    face_bytes: [usize; 6],
    published: [[usize; 6]; 2],
    recv: [usize; 6],
    total: usize,
}

impl Layout {
    fn new(n: [usize; 3]) -> Layout {
        let face_bytes = [0, 1, 2, 3, 4, 5].map(|f| {
            let a = f / 2;
            8 * (0..3).filter(|&b| b != a).map(|b| n[b]).product::<usize>()
        });
        let mut at = 0;
        let mut next = |len: usize| {
            let o = at;
            // keep every area 64-byte aligned
            at += len.next_multiple_of(64);
            o
        };
        let published = [0, 1].map(|_| face_bytes.map(&mut next));
        let recv = face_bytes.map(&mut next);
        Layout {
            face_bytes,
            published,
            recv,
            total: at,
        }
    }
}

/// Runs the kernel on a fresh runtime with `base`'s machine shape and `mode`.
pub fn heat3d(base: &Config, hc: &HeatConfig, mode: ProgressMode) -> Result<HeatResult> {
    hc.validate()?;
    let config = Config {
        mode,
        transcript: false,
        ..base.clone()
    };
    let mut rt = Runtime::init(config)?;
    if rt.team_all().len() != hc.units() {
        return Err(BenchError::Setup(format!(
            "decomposition {} needs {} application units, the machine has {}",
            Grid(hc.decomp),
            hc.units(),
            rt.team_all().len()
        )));
    }
    let outs = rt.run(|u| unit_main(u, hc));
    let report = rt.finalize()?;
    let outs = outs.into_iter().collect::<Result<Vec<_>>>()?;

    let n = hc.block();
    let [gx, gy, _] = hc.grid;
    let mut field = vec![0.0; hc.grid.iter().product()];
    for o in &outs {
        for k in 0..n[2] {
            for j in 0..n[1] {
                let src = (k * n[1] + j) * n[0];
                let (x, y, z) = (o.coords[0] * n[0], o.coords[1] * n[1] + j, o.coords[2] * n[2] + k);
                let dst = (z * gy + y) * gx + x;
                field[dst..dst + n[0]].copy_from_slice(&o.block[src..src + n[0]]);
            }
        }
    }
    hc.check_finite(&field)?;
    let units = outs.len() as f64;
    Ok(HeatResult {
        total_t_ms: outs.iter().map(|o| o.total_ms).fold(0.0, f64::max),
        comm_t_ms: outs.iter().map(|o| o.total_ms - o.phases.calc_cpu_ms).sum::<f64>() / units,
        calc_fraction: outs.iter().map(|o| o.phases.calc_cpu_ms / o.total_ms).sum::<f64>() / units,
        checksum: checksum(&field),
        field,
        phases: Phases::mean(&outs.iter().map(|o| o.phases).collect::<Vec<_>>()),
        agent_metrics: report.agent_metrics,
    })
}

fn unit_main(u: &mut Unit, hc: &HeatConfig) -> Result<UnitOut> {
    let team = u.team_all();
    let me = team.position(u.id()).expect("member of TEAM_ALL");
    let [px, py, _] = hc.decomp;
    let coords = [me % px, (me / px) % py, me / (px * py)];
    let n = hc.block();
    let layout = Layout::new(n);
    let seg = u.team_alloc_aligned(&team, layout.total)?;

    // neighbour across each face, as a pointer to its segment portion
    let neighbours: [Option<GlobalPtr>; 6] = [0, 1, 2, 3, 4, 5].map(|f| {
        let a = f / 2;
        let mut c = coords;
        if f % 2 == 0 {
            c[a] = c[a].checked_sub(1)?;
        } else {
            c[a] += 1;
            if c[a] >= hc.decomp[a] {
                return None;
            }
        }
        let rank = c[0] + c[1] * px + c[2] * px * py;
        Some(seg.on(team.members()[rank]))
    });
    let ghost = |f: usize| if f % 2 == 0 { 0 } else { n[f / 2] + 1 };
    let edge = |f: usize| if f % 2 == 0 { 1 } else { n[f / 2] };

    let origin = [0, 1, 2].map(|a| coords[a] * n[a]);
    let mut cur = initial_block(hc, n, origin);
    for (f, nbr) in neighbours.iter().enumerate() {
        if nbr.is_none() {
            cur.fill_layer(f / 2, ghost(f), hc.boundary[f]);
        }
    }
    let mut next = cur.clone();
    let r = hc.dt / (hc.dx * hc.dx);
    let mut buf = Vec::new();
    let publish = |u: &Unit, b: &Block, parity: usize, buf: &mut Vec<u8>| -> Result<()> {
        for (f, nbr) in neighbours.iter().enumerate() {
            if nbr.is_some() {
                b.pack(f / 2, edge(f), buf);
                u.write_local(seg.add(layout.published[parity][f]), buf)?;
            }
        }
        Ok(())
    };
    publish(u, &cur, 0, &mut buf)?;
    u.barrier(&team)?;

    let mut ph = Phases::default();
    let start = Instant::now();
    for step in 0..hc.iters {
        let parity = step % 2;
        let t0 = Instant::now();
        let mut hs: Vec<Handle> = Vec::with_capacity(6);
        for (f, nbr) in neighbours.iter().enumerate() {
            if let Some(p) = nbr {
                // the neighbour's layer facing us is its opposite face
                let src = p.add(layout.published[parity][f ^ 1]);
                hs.push(u.get_nb(src, seg.add(layout.recv[f]), layout.face_bytes[f])?);
            }
        }
        let t1 = Instant::now();
        let c1 = thread_cpu();
        if n.iter().all(|&m| m > 2) {
            sweep_box(&cur, &mut next, 2..=n[0] - 1, 2..=n[1] - 1, 2..=n[2] - 1, hc.kappa, r);
        }
        let c2 = thread_cpu();
        let t2 = Instant::now();
        u.waitall(&mut hs)?;
        for (f, nbr) in neighbours.iter().enumerate() {
            if nbr.is_some() {
                let bytes = u.read_local(seg.add(layout.recv[f]), layout.face_bytes[f])?;
                cur.unpack(f / 2, ghost(f), &bytes);
            }
        }
        let t3 = Instant::now();
        let c3 = thread_cpu();
        for [is, js, ks] in shell_boxes(n) {
            sweep_box(&cur, &mut next, is, js, ks, hc.kappa, r);
        }
        std::mem::swap(&mut cur, &mut next);
        let c4 = thread_cpu();
        let t4 = Instant::now();
        publish(u, &cur, 1 - parity, &mut buf)?;
        let t5 = Instant::now();
        u.barrier(&team)?;
        let t6 = Instant::now();
        ph.post_ms += ms(t1 - t0);
        ph.wait_ms += ms(t3 - t2);
        ph.publish_ms += ms(t5 - t4);
        ph.barrier_ms += ms(t6 - t5);
        ph.calc_wall_ms += ms(t2 - t1 + (t4 - t3));
        ph.calc_cpu_ms += ms(c2 - c1 + (c4 - c3));
    }
    let total_ms = ms(start.elapsed());
    u.team_free(seg)?;
    Ok(UnitOut {
        coords,
        block: interior(&cur),
        total_ms,
        phases: ph,
    })
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// One row of the heat3d CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatRow {
    pub grid: String,
    pub units: usize,
    pub mode: String,
    pub iters: usize,
    pub total_t_ms: f64,
    pub comm_t_ms: f64,
    pub calc_fraction: f64,
    pub checksum: String,
}

impl HeatRow {
    pub fn new(hc: &HeatConfig, mode: ProgressMode, r: &HeatResult) -> HeatRow {
        HeatRow {
            grid: Grid(hc.grid).to_string(),
            units: hc.units(),
            mode: mode.as_str().to_string(),
            iters: hc.iters,
            total_t_ms: r.total_t_ms,
            comm_t_ms: r.comm_t_ms,
            calc_fraction: r.calc_fraction,
            checksum: format!("{:016x}", r.checksum),
        }
    }
}
