mod common;

use std::time::{Duration, Instant};

use asyncrma::{Config, CtrlMessage, Error, LogKind, ProgressMode, Runtime, Tag};
use common::config;

fn wait_until(what: &str, mut cond: impl FnMut() -> bool) {
    let deadline = Instant::now() + Duration::from_secs(10);
    while !cond() {
        assert!(Instant::now() < deadline, "timed out waiting for {what}");
        std::thread::sleep(Duration::from_millis(1));
    }
}

#[test]
fn finalize_collects_one_ack_per_agent() {
    for (nodes, upn, apn) in [(1, 2, 1), (2, 4, 1), (3, 5, 2), (2, 6, 4)] {
        let cfg = Config {
            nodes,
            units_per_node: upn,
            agents_per_node: apn,
            ..Config::default()
        };
        let rt = Runtime::init(cfg).unwrap();
        let report = rt.finalize().unwrap();
        assert_eq!(report.exit_acks, nodes * apn);
        for m in report.agent_metrics.values() {
            assert!(m.exited);
            assert_eq!(m.requests, 0);
            assert_eq!(m.queue_len, 0);
        }
    }
}

#[test]
fn team_all_excludes_agents() {
    let cfg = Config {
        nodes: 2,
        units_per_node: 5,
        agents_per_node: 2,
        ..Config::default()
    };
    let rt = Runtime::init(cfg).unwrap();
    let all = rt.team_all();
    assert_eq!(all.len(), 6);
    assert!(all.members().iter().all(|u| !u.is_agent()));
    let agent = rt.topology().agents().next().unwrap();
    assert!(matches!(rt.team_create(&[agent]), Err(Error::Usage(_))));
    assert!(matches!(rt.agent_for(agent, 0), Err(Error::Usage(_))));
    let sub = rt.team_create(&all.members()[..2]).unwrap();
    assert_ne!(sub.index(), all.index());
    rt.finalize().unwrap();
}

#[test]
fn init_rejects_bad_configs() {
    let cfg = Config {
        agents_per_node: 0,
        ..Config::default()
    };
    assert!(matches!(Runtime::init(cfg), Err(Error::Config(_))));
}

#[test]
fn collective_segment_lifecycle() {
    let mut rt = Runtime::init(config(2, ProgressMode::Agent)).unwrap();
    let seg = rt.run(|u| {
        let team = u.team_all();
        u.team_alloc_aligned(&team, 1000).unwrap()
    })[0];
    assert_eq!(seg.segid, 1);
    let info = rt.segment(1).unwrap();
    assert!(info.epoch_open);
    for agent in rt.topology().agents() {
        assert_eq!(info.base_sizes[&agent], 0);
    }
    for u in rt.team_all().members() {
        assert_eq!(info.base_sizes[u], 1000);
        assert_eq!(info.base_addrs[u] % 64, 0);
    }
    assert!(rt.dump_segments().contains("segid=1"));

    let second = rt.run(|u| {
        let team = u.team_all();
        u.team_free(seg.on(u.id())).unwrap();
        let again = u.team_alloc_aligned(&team, 64).unwrap();
        // freed segments are gone for good
        let err = u.resolve(seg.on(u.id()), 8).unwrap_err();
        assert!(matches!(err, Error::StaleSegment { segid: 1 }));
        again.segid
    });
    assert!(second.iter().all(|&s| s == 2));
    assert!(rt.segment(1).is_none());
    assert_eq!(rt.last_segid(), 2);
    rt.finalize().unwrap();
}

#[test]
fn subteam_allocation_involves_only_its_nodes_agents() {
    let mut rt = Runtime::init(config(2, ProgressMode::Agent)).unwrap();
    let all = rt.team_all();
    let node0: Vec<_> = all.members().iter().copied().filter(|u| u.node() == 0).collect();
    let sub = rt.team_create(&node0).unwrap();
    let segid = rt.run(|u| {
        if sub.contains(u.id()) {
            Some(u.team_alloc_aligned(&sub, 256).unwrap().segid)
        } else {
            None
        }
    })[0]
    .unwrap();
    let info = rt.segment(segid).unwrap();
    let agents: Vec<_> = info.base_sizes.keys().filter(|u| u.is_agent()).collect();
    assert_eq!(agents.len(), 1);
    assert_eq!(agents[0].node(), 0);
    rt.finalize().unwrap();
}

#[test]
fn free_refuses_while_handles_are_outstanding() {
    let mut rt = Runtime::init(config(2, ProgressMode::Deferred)).unwrap();
    rt.run(|u| {
        let team = u.team_all();
        let seg = u.team_alloc_aligned(&team, 64).unwrap();
        u.barrier(&team).unwrap();
        if u.id().rank() == 0 {
            let mut h = u.get_nb(seg.on(team.members()[2]), seg, 8).unwrap();
            match u.team_free(seg) {
                Err(Error::OutstandingHandles(ids)) => assert_eq!(ids, vec![h.id()]),
                other => panic!("expected outstanding handles, got {other:?}"),
            }
            u.wait(&mut h).unwrap();
        }
        u.barrier(&team).unwrap();
        u.team_free(seg).unwrap();
    });
    rt.finalize().unwrap();
}

#[test]
fn finalize_reports_leaked_handles_and_still_stops_agents() {
    let mut rt = Runtime::init(config(2, ProgressMode::Agent)).unwrap();
    let leaked = rt.run(|u| {
        let team = u.team_all();
        let seg = u.team_alloc_aligned(&team, 16 * 1024).unwrap();
        u.barrier(&team).unwrap();
        if u.id().rank() == 0 {
            let h = u.get_nb(seg.on(team.members()[2]), seg, 8192).unwrap();
            let id = h.id();
            drop(h);
            Some(id)
        } else {
            None
        }
    })[0]
    .unwrap();
    assert_eq!(rt.outstanding_handles(), vec![leaked]);
    match rt.finalize() {
        Err(Error::LeakedHandles(ids)) => assert_eq!(ids, vec![leaked]),
        other => panic!("expected leaked handles, got {other:?}"),
    }
}

#[test]
fn dropping_the_runtime_stops_agents() {
    let mut rt = Runtime::init(config(3, ProgressMode::Agent)).unwrap();
    rt.run(|u| {
        let team = u.team_all();
        u.team_alloc_aligned(&team, 64).unwrap();
    });
    drop(rt);
}

#[test]
fn reserved_region_allocation() {
    let cfg = Config {
        region_bytes: 4096,
        ..config(1, ProgressMode::EagerDirect)
    };
    let mut rt = Runtime::init(cfg).unwrap();
    let u = rt.unit_mut(0);
    let a = u.local_alloc(1000).unwrap();
    let b = u.local_alloc(1000).unwrap();
    assert_eq!((a.segid, a.offset, b.offset), (0, 0, 1000));
    match u.local_alloc(4096) {
        Err(Error::Alloc { requested, .. }) => assert_eq!(requested, 4096),
        other => panic!("expected allocation failure, got {other:?}"),
    }
    u.local_free(a).unwrap();
    assert!(u.local_free(a).is_err());
    assert_eq!(u.local_alloc(8).unwrap().offset, 0);
    assert_eq!(u.region_remaining(), 4096 - 1008);
    rt.finalize().unwrap();
}

#[test]
fn agent_reports_unknown_team_index() {
    let mut rt = Runtime::init(config(2, ProgressMode::Agent)).unwrap();
    let unit = rt.unit_mut(0).id();
    let agent = rt.agent_for(unit, 0).unwrap();
    for tag in [Tag::Free, Tag::Alloc] {
        rt.transport()
            .send_ctrl(CtrlMessage {
                src: unit,
                dst: agent,
                tag,
                payload: 99u32.to_le_bytes().to_vec(),
            })
            .unwrap();
    }
    wait_until("protocol errors", || {
        rt.agent_metrics(agent).unwrap().protocol_errors == 2
    });
    let errors = rt
        .transcript()
        .into_iter()
        .filter(|e| e.kind == LogKind::Error)
        .count();
    assert_eq!(errors, 2);
    rt.finalize().unwrap();
}
