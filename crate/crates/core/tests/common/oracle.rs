//! Randomized put/get scripts checked against a flat byte-array replay.
//!
//! A script is a global sequence of events. Each event belongs to one unit
//! and units execute their events strictly in script order, handing a turn
//! token around. Before an operation that touches bytes still in use by a
//! pending operation (at least one side writing), the generator inserts a
//! `WaitAll` for the owner of that pending operation, so the final state is
//! the same as executing every operation instantly in script order.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use asyncrma::{Config, GlobalPtr, Handle, ProgressMode, PutSource, Runtime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Get,
    Put,
}

#[derive(Debug, Clone, Copy)]
pub enum Event {
    Issue {
        origin: usize,
        target: usize,
        op: Op,
        local_off: usize,
        target_off: usize,
        n: usize,
    },
    WaitAll(usize),
}

impl Event {
    fn owner(&self) -> usize {
        match *self {
            Event::Issue { origin, .. } => origin,
            Event::WaitAll(u) => u,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Access {
    unit: usize,
    lo: usize,
    hi: usize,
    write: bool,
}

fn accesses(e: &Event) -> [Access; 2] {
    let Event::Issue {
        origin,
        target,
        op,
        local_off,
        target_off,
        n,
    } = *e
    else {
        unreachable!("only issues access memory")
    };
    let local = Access {
        unit: origin,
        lo: local_off,
        hi: local_off + n,
        write: op == Op::Get,
    };
    let remote = Access {
        unit: target,
        lo: target_off,
        hi: target_off + n,
        write: op == Op::Put,
    };
    [local, remote]
}

fn conflicts(a: &Access, b: &Access) -> bool {
    a.unit == b.unit && (a.write || b.write) && a.lo < b.hi && b.lo < a.hi
}

pub struct Script {
    pub units: usize,
    pub seg_bytes: usize,
    pub events: Vec<Event>,
    pub init: Vec<Vec<u8>>,
}

/// `ops` operations over `units` application units, sizes drawn on both
/// sides of `threshold`.
pub fn generate(seed: u64, units: usize, seg_bytes: usize, ops: usize, threshold: usize) -> Script {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = (0..units)
        .map(|_| (0..seg_bytes).map(|_| rng.gen()).collect())
        .collect();
    let mut pending: Vec<Vec<Access>> = vec![Vec::new(); units];
    let mut events = Vec::new();
    for i in 0..ops {
        let origin = rng.gen_range(0..units);
        let mut target = rng.gen_range(0..units - 1);
        if target >= origin {
            target += 1;
        }
        let op = if rng.gen_bool(0.5) { Op::Get } else { Op::Put };
        let n = if i % 2 == 0 {
            rng.gen_range(1..=threshold)
        } else {
            rng.gen_range(threshold + 1..=2 * threshold)
        };
        let local_off = rng.gen_range(0..=seg_bytes - n);
        let target_off = rng.gen_range(0..=seg_bytes - n);
        let e = Event::Issue {
            origin,
            target,
            op,
            local_off,
            target_off,
            n,
        };
        let acc = accesses(&e);
        for (u, p) in pending.iter_mut().enumerate() {
            if p.iter().any(|a| acc.iter().any(|b| conflicts(a, b))) {
                events.push(Event::WaitAll(u));
                p.clear();
            }
        }
        pending[origin].extend(acc);
        events.push(e);
    }
    for u in 0..units {
        events.push(Event::WaitAll(u));
    }
    Script {
        units,
        seg_bytes,
        events,
        init,
    }
}

/// Sequential execution of the script on plain byte arrays.
pub fn replay(script: &Script) -> Vec<Vec<u8>> {
    let mut mem = script.init.clone();
    for e in &script.events {
        if let Event::Issue {
            origin,
            target,
            op,
            local_off,
            target_off,
            n,
        } = *e
        {
            let (src, dst, so, doff) = match op {
                Op::Get => (target, origin, target_off, local_off),
                Op::Put => (origin, target, local_off, target_off),
            };
            let bytes = mem[src][so..so + n].to_vec();
            mem[dst][doff..doff + n].copy_from_slice(&bytes);
        }
    }
    mem
}

/// Counts of issued operations by path, for coverage checks.
#[derive(Debug, Default, Clone, Copy)]
pub struct Coverage {
    pub intra: usize,
    pub inter: usize,
    pub small: usize,
    pub large: usize,
}

/// Machine with two nodes of two application units and one agent each.
pub fn oracle_config(mode: ProgressMode) -> Config {
    Config {
        nodes: 2,
        units_per_node: 3,
        agents_per_node: 1,
        mode,
        net_latency: Duration::from_micros(20),
        ..Config::default()
    }
}

/// Runs `script` on a fresh runtime and returns each unit's final segment.
pub fn execute(script: &Script, config: Config) -> (Vec<Vec<u8>>, Coverage) {
    let mut rt = Runtime::init(config).expect("runtime");
    assert_eq!(rt.team_all().len(), script.units);
    let turn = (Mutex::new(0usize), Condvar::new());
    let bases: Vec<GlobalPtr> = rt
        .run(|u| {
            let team = u.team_all();
            let seg = u.team_alloc_aligned(&team, script.seg_bytes).unwrap();
            let me = team.position(u.id()).unwrap();
            u.write_local(seg, &script.init[me]).unwrap();
            u.barrier(&team).unwrap();
            let members = team.members().to_vec();
            let mut handles: Vec<Handle> = Vec::new();
            for (k, e) in script.events.iter().enumerate() {
                if e.owner() != me {
                    continue;
                }
                let mut t = turn.0.lock().unwrap();
                while *t != k {
                    let (g, w) = turn.1.wait_timeout(t, Duration::from_secs(60)).unwrap();
                    assert!(!w.timed_out(), "event {k} never got its turn");
                    t = g;
                }
                drop(t);
                match *e {
                    Event::WaitAll(_) => {
                        u.waitall(&mut handles).unwrap();
                        handles.clear();
                    }
                    Event::Issue {
                        target,
                        op,
                        local_off,
                        target_off,
                        n,
                        ..
                    } => {
                        let remote = GlobalPtr {
                            unit: members[target],
                            offset: target_off,
                            ..seg
                        };
                        let local = seg.add(local_off);
                        let h = match op {
                            Op::Get => u.get_nb(remote, local, n),
                            Op::Put => u.put_nb(remote, PutSource::Segment(local), n),
                        };
                        handles.push(h.unwrap());
                    }
                }
                *turn.0.lock().unwrap() = k + 1;
                turn.1.notify_all();
            }
            u.barrier(&team).unwrap();
            seg
        });
    let mut cov = Coverage::default();
    let members = rt.team_all().members().to_vec();
    for e in &script.events {
        if let Event::Issue {
            origin, target, n, ..
        } = *e
        {
            if members[origin].node() == members[target].node() {
                cov.intra += 1;
            } else {
                cov.inter += 1;
            }
            if n > rt.config().threshold_bytes {
                cov.large += 1;
            } else {
                cov.small += 1;
            }
        }
    }
    let out = bases
        .iter()
        .map(|g| rt.peek(*g, script.seg_bytes).unwrap())
        .collect();
    rt.finalize().expect("clean finalize");
    (out, cov)
}
