mod common;

use std::time::{Duration, Instant};

use asyncrma::{Config, Error, LogKind, ProgressMode, PutSource, Runtime, Tag};
use common::{config, count_ctrl};

const KIB: usize = 1024;

#[test]
fn threshold_routes_large_gets_to_the_agent() {
    let mut rt = Runtime::init(config(2, ProgressMode::Agent)).unwrap();
    let counts = rt.run(|u| {
        let team = u.team_all();
        let seg = u.team_alloc_aligned(&team, 64 * KIB).unwrap();
        u.barrier(&team).unwrap();
        if u.id().rank() == 0 {
            let remote = seg.on(team.members()[3]);
            for n in [1, 4095, 4096] {
                u.get(remote, seg, n).unwrap();
            }
            for n in [4097, 8 * KIB, 64 * KIB] {
                u.get(remote, seg, n).unwrap();
            }
        }
        u.barrier(&team).unwrap();
    });
    assert_eq!(counts.len(), 4);
    let log = rt.transcript();
    assert_eq!(count_ctrl(&log, Tag::Get), 3);
    assert_eq!(count_ctrl(&log, Tag::Wait), 3);
    assert_eq!(count_ctrl(&log, Tag::WaitDone), 3);
    rt.finalize().unwrap();
}

#[test]
fn eager_direct_never_uses_the_agent() {
    let mut rt = Runtime::init(config(2, ProgressMode::EagerDirect)).unwrap();
    rt.run(|u| {
        let team = u.team_all();
        let seg = u.team_alloc_aligned(&team, 64 * KIB).unwrap();
        if u.id().rank() == 0 {
            u.get(seg.on(team.members()[2]), seg, 64 * KIB).unwrap();
            u.put(seg.on(team.members()[2]), PutSource::Segment(seg), 64 * KIB)
                .unwrap();
        }
        u.barrier(&team).unwrap();
    });
    let log = rt.transcript();
    assert_eq!(count_ctrl(&log, Tag::Get) + count_ctrl(&log, Tag::Put), 0);
    assert_eq!(count_ctrl(&log, Tag::Wait), 0);
    rt.finalize().unwrap();
}

#[test]
fn deferred_transfers_start_in_wait() {
    let mut rt = Runtime::init(config(2, ProgressMode::Deferred)).unwrap();
    let seg = rt.run(|u| {
        let team = u.team_all();
        let seg = u.team_alloc_aligned(&team, 16 * KIB).unwrap();
        u.write_local(seg, &vec![u.id().rank() as u8 + 1; 16 * KIB]).unwrap();
        u.barrier(&team).unwrap();
        if u.id().rank() == 0 {
            let mut h = u.get_nb(seg.on(team.members()[2]), seg, 8 * KIB).unwrap();
            let xfers = u
                .transport()
                .transcript()
                .iter()
                .filter(|e| e.kind == LogKind::Xfer)
                .count();
            assert_eq!(xfers, 0);
            assert_eq!(u.read_local(seg, 1).unwrap(), [1]);
            u.wait(&mut h).unwrap();
            assert_eq!(u.read_local(seg, 8 * KIB).unwrap(), vec![4; 8 * KIB]);
        }
        u.barrier(&team).unwrap();
        seg
    })[0];
    assert_eq!(rt.peek(seg, 1).unwrap(), [4]);
    rt.finalize().unwrap();
}

#[test]
fn waitall_sends_one_wait_per_distinct_agent() {
    // two agents per node, units {0,1} on agent 4 and {2,3} on agent 5
    let cfg = Config {
        nodes: 2,
        units_per_node: 6,
        agents_per_node: 2,
        mode: ProgressMode::Agent,
        ..Config::default()
    };
    let mut rt = Runtime::init(cfg).unwrap();
    rt.run(|u| {
        let team = u.team_all();
        let seg = u.team_alloc_aligned(&team, 128 * KIB).unwrap();
        u.barrier(&team).unwrap();
        if u.id().rank() == 0 {
            let remote = seg.on(team.members()[5]);
            let mut hs: Vec<_> = (0..10)
                .map(|i| u.get_nb(remote.add(i * 8 * KIB), seg.add(i * 8 * KIB), 8 * KIB).unwrap())
                .collect();
            assert!(hs.iter().all(|h| h.agent() == Some(u.agent())));
            u.waitall(&mut hs).unwrap();
            assert!(hs.iter().all(|h| h.is_completed()));
            // waiting again is free
            u.waitall(&mut hs).unwrap();
            u.waitall(&mut []).unwrap();
        }
        u.barrier(&team).unwrap();
    });
    let log = rt.transcript();
    assert_eq!(count_ctrl(&log, Tag::Get), 10);
    assert_eq!(count_ctrl(&log, Tag::Wait), 1);
    assert_eq!(count_ctrl(&log, Tag::WaitDone), 1);
    rt.finalize().unwrap();
}

#[test]
fn origins_on_different_agents_wait_separately() {
    let cfg = Config {
        nodes: 2,
        units_per_node: 4,
        agents_per_node: 2,
        mode: ProgressMode::Agent,
        ..Config::default()
    };
    let mut rt = Runtime::init(cfg).unwrap();
    let agents = rt.run(|u| {
        let team = u.team_all();
        let seg = u.team_alloc_aligned(&team, 64 * KIB).unwrap();
        u.barrier(&team).unwrap();
        let mut hs = Vec::new();
        if u.id().rank() == 0 {
            hs.push(u.get_nb(seg.on(team.members()[2]), seg, 8 * KIB).unwrap());
        }
        if u.id().rank() == 1 {
            hs.push(u.get_nb(seg.on(team.members()[3]), seg, 8 * KIB).unwrap());
        }
        let agents: Vec<_> = hs.iter().filter_map(|h| h.agent()).collect();
        u.waitall(&mut hs).unwrap();
        u.barrier(&team).unwrap();
        agents
    });
    assert_ne!(agents[0], agents[1]);
    assert_eq!(count_ctrl(&rt.transcript(), Tag::Wait), 2);
    rt.finalize().unwrap();
}

#[test]
fn wait_done_follows_the_last_flush() {
    let mut rt = Runtime::init(config(2, ProgressMode::Agent)).unwrap();
    rt.run(|u| {
        let team = u.team_all();
        let seg = u.team_alloc_aligned(&team, 256 * KIB).unwrap();
        u.barrier(&team).unwrap();
        if u.id().rank() == 0 {
            let mut hs: Vec<_> = (0..4)
                .map(|i| {
                    let off = i * 64 * KIB;
                    u.get_nb(seg.on(team.members()[2]).add(off), seg.add(off), 64 * KIB)
                        .unwrap()
                })
                .collect();
            u.waitall(&mut hs).unwrap();
        }
        u.barrier(&team).unwrap();
    });
    let log = rt.transcript();
    let agent = rt.topology().agents().next().unwrap().rank();
    let done = log.iter().position(|e| e.is_ctrl(Tag::WaitDone)).unwrap();
    let last_flush = log
        .iter()
        .rposition(|e| e.kind == LogKind::Flush && e.src == agent)
        .unwrap();
    assert!(last_flush < done);
    assert!(log[last_flush].time <= log[done].time);
    rt.finalize().unwrap();
}

#[test]
fn nonblocking_plus_wait_equals_blocking() {
    for mode in ProgressMode::ALL {
        let mut rt = Runtime::init(config(2, mode)).unwrap();
        rt.run(|u| {
            let team = u.team_all();
            let seg = u.team_alloc_aligned(&team, 32 * KIB).unwrap();
            let fill: Vec<u8> = (0..32 * KIB).map(|i| (i * 7 + u.id().rank() as usize) as u8).collect();
            u.write_local(seg, &fill).unwrap();
            u.barrier(&team).unwrap();
            if u.id().rank() == 1 {
                let remote = seg.on(team.members()[2]);
                let mut h = u.get_nb(remote, seg, 12 * KIB).unwrap();
                u.wait(&mut h).unwrap();
                let a = u.read_local(seg, 12 * KIB).unwrap();
                u.get(remote, seg.add(16 * KIB), 12 * KIB).unwrap();
                let b = u.read_local(seg.add(16 * KIB), 12 * KIB).unwrap();
                assert_eq!(a, b);
            }
            u.barrier(&team).unwrap();
        });
        rt.finalize().unwrap();
    }
}

#[test]
fn two_puts_to_one_location_keep_the_second() {
    let mut rt = Runtime::init(config(2, ProgressMode::Agent)).unwrap();
    let seg = rt.run(|u| {
        let team = u.team_all();
        let seg = u.team_alloc_aligned(&team, 32 * KIB).unwrap();
        if u.id().rank() == 0 {
            u.write_local(seg, &vec![1; 8 * KIB]).unwrap();
            u.write_local(seg.add(8 * KIB), &vec![2; 8 * KIB]).unwrap();
        }
        u.barrier(&team).unwrap();
        if u.id().rank() == 0 {
            let remote = seg.on(team.members()[2]).add(16 * KIB);
            let mut hs = vec![
                u.put_nb(remote, PutSource::Segment(seg), 8 * KIB).unwrap(),
                u.put_nb(remote, PutSource::Segment(seg.add(8 * KIB)), 8 * KIB).unwrap(),
            ];
            u.waitall(&mut hs).unwrap();
        }
        u.barrier(&team).unwrap();
        seg
    });
    let target = seg[2].add(16 * KIB);
    assert_eq!(rt.peek(target, 8 * KIB).unwrap(), vec![2; 8 * KIB]);
    rt.finalize().unwrap();
}

#[test]
fn agent_put_needs_a_registered_source() {
    let mut rt = Runtime::init(config(2, ProgressMode::Agent)).unwrap();
    rt.run(|u| {
        let team = u.team_all();
        let seg = u.team_alloc_aligned(&team, 16 * KIB).unwrap();
        if u.id().rank() == 0 {
            let buf = vec![9u8; 8 * KIB];
            let remote = seg.on(team.members()[2]);
            let err = u.put_nb(remote, PutSource::Bytes(&buf), 8 * KIB).unwrap_err();
            assert!(matches!(err, Error::Argument(_)), "{err}");
            // below the threshold the direct path accepts any buffer
            u.put(remote, PutSource::Bytes(&buf[..1024]), 1024).unwrap();
            // the agent reaches origin memory only through the target segment
            let region = u.local_alloc(8 * KIB).unwrap();
            let err = u.get_nb(remote, region, 8 * KIB).unwrap_err();
            assert!(matches!(err, Error::Argument(_)), "{err}");
        }
        u.barrier(&team).unwrap();
    });
    rt.finalize().unwrap();
}

#[test]
fn invalid_arguments() {
    let mut rt = Runtime::init(config(2, ProgressMode::Agent)).unwrap();
    rt.run(|u| {
        let team = u.team_all();
        let seg = u.team_alloc_aligned(&team, 4 * KIB).unwrap();
        if u.id().rank() == 0 {
            let remote = seg.on(team.members()[2]);
            assert!(matches!(u.get_nb(remote, seg, 0), Err(Error::Argument(_))));
            assert!(matches!(
                u.get_nb(remote.add(4 * KIB - 8), seg, 16),
                Err(Error::Bounds { .. })
            ));
            assert!(matches!(u.get_nb(remote, remote, 8), Err(Error::Argument(_))));
            let p = u.encode_packet(remote, 0, 64).unwrap();
            assert_eq!(p.is_shmem, 0);
            assert_eq!(p.dest, remote.unit.rank());
            let p = u.encode_packet(seg.on(team.members()[1]), 128, 64).unwrap();
            assert_eq!((p.is_shmem, p.origin_offset, p.segid), (1, 128, seg.segid));
            let region = u.local_alloc(64).unwrap();
            assert_eq!(u.encode_packet(region, 0, 64).unwrap().segid, 0);
            u.local_free(region).unwrap();
        }
        u.barrier(&team).unwrap();
    });
    rt.finalize().unwrap();
}

#[test]
fn intra_node_blocking_get_is_immediate_and_cross_node_pays_latency() {
    let cfg = Config {
        net_latency: Duration::from_millis(5),
        ..config(2, ProgressMode::Agent)
    };
    let mut rt = Runtime::init(cfg).unwrap();
    rt.run(|u| {
        let team = u.team_all();
        let seg = u.team_alloc_aligned(&team, 4 * KIB).unwrap();
        u.barrier(&team).unwrap();
        if u.id().rank() == 0 {
            let t = Instant::now();
            u.get(seg.on(team.members()[1]), seg, 1024).unwrap();
            assert!(t.elapsed() < Duration::from_millis(5));
            let t = Instant::now();
            u.get(seg.on(team.members()[2]), seg, 1024).unwrap();
            assert!(t.elapsed() >= Duration::from_millis(5));
        }
        u.barrier(&team).unwrap();
    });
    rt.finalize().unwrap();
}

#[test]
fn handles_belong_to_their_origin() {
    let mut rt = Runtime::init(config(2, ProgressMode::EagerDirect)).unwrap();
    let seg = rt.run(|u| {
        let team = u.team_all();
        u.team_alloc_aligned(&team, 4 * KIB).unwrap()
    });
    let members = rt.team_all().members().to_vec();
    let mut h = rt.unit_mut(0).get_nb(seg[0].on(members[2]), seg[0], 8).unwrap();
    let err = rt.unit_mut(1).wait(&mut h).unwrap_err();
    assert!(matches!(err, Error::Usage(_)));
    rt.unit_mut(0).wait(&mut h).unwrap();
    rt.finalize().unwrap();
}
