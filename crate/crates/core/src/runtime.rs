//! Machine construction, core partitioning and shutdown.
//!
//! Ranks are laid out node-major. On every node the highest
//! `agents_per_node` local ranks are progress agents; the rest are
//! application units. Agents never appear in a [`Team`]. Each application
//! unit is bound to one on-node agent at startup, spreading the application
//! units over the agents in contiguous blocks.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use crate::collective::Collectives;
use crate::config::{Config, ProgressMode};
use crate::error::{Error, Result};
use crate::memory::{GlobalPtr, LocalView, Memory, SegmentInfo};
use crate::progress::{Agent, AgentCounters, AgentMetrics};
use crate::rma::HandleId;
use crate::transport::{CostModel, CtrlMessage, LogEntry, Tag, Transport};

/// Team id of the team holding every application unit.
pub const TEAM_ALL: u32 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Application,
    Agent,
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct UnitId {
    global_rank: u32,
    node: u32,
    role: Role,
}

impl UnitId {
    pub fn new(global_rank: u32, node: u32, role: Role) -> UnitId {
        UnitId {
            global_rank,
            node,
            role,
        }
    }

    pub fn rank(self) -> u32 {
        self.global_rank
    }

    pub fn node(self) -> u32 {
        self.node
    }

    pub fn role(self) -> Role {
        self.role
    }

    pub fn is_agent(self) -> bool {
        self.role == Role::Agent
    }
}

impl fmt::Display for UnitId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.role {
            Role::Application => write!(f, "unit{}", self.global_rank),
            Role::Agent => write!(f, "agent{}", self.global_rank),
        }
    }
}

impl fmt::Debug for UnitId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}@n{}", self.node)
    }
}

/// An ordered set of application units.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Team {
    id: u32,
    index: u32,
    members: Arc<[UnitId]>,
}

impl Team {
    pub fn id(&self) -> u32 {
        self.id
    }

    /// Handle carried in packets and segment records.
    pub fn index(&self) -> u32 {
        self.index
    }

    pub fn members(&self) -> &[UnitId] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, u: UnitId) -> bool {
        self.members.binary_search(&u).is_ok()
    }

    /// Position of `u` within the team.
    pub fn position(&self, u: UnitId) -> Option<usize> {
        self.members.binary_search(&u).ok()
    }

    /// Lowest-ranked member on `node`.
    pub fn leader_on(&self, node: u32) -> Option<UnitId> {
        self.members.iter().copied().find(|m| m.node() == node)
    }
}

/// Static layout of units, agents and origin-to-agent bindings.
#[derive(Debug, Clone)]
pub struct Topology {
    nodes: usize,
    units: Vec<UnitId>,
    agents_by_node: Vec<Vec<UnitId>>,
    apps_by_node: Vec<Vec<UnitId>>,
    binding: HashMap<UnitId, UnitId>,
    bound: BTreeMap<UnitId, Vec<UnitId>>,
}

impl Topology {
    pub fn build(cfg: &Config) -> Result<Topology> {
        cfg.validate()?;
        let upn = cfg.units_per_node;
        let apps = cfg.app_units_per_node();
        let mut units = Vec::with_capacity(cfg.total_units());
        let mut agents_by_node = Vec::with_capacity(cfg.nodes);
        let mut apps_by_node = Vec::with_capacity(cfg.nodes);
        let mut binding = HashMap::new();
        let mut bound = BTreeMap::new();
        for node in 0..cfg.nodes {
            let base = (node * upn) as u32;
            let node_apps: Vec<UnitId> = (0..apps as u32)
                .map(|l| UnitId::new(base + l, node as u32, Role::Application))
                .collect();
            let node_agents: Vec<UnitId> = (apps as u32..upn as u32)
                .map(|l| UnitId::new(base + l, node as u32, Role::Agent))
                .collect();
            for a in &node_agents {
                bound.insert(*a, Vec::new());
            }
            // contiguous blocks: every agent serves floor or ceil(apps/agents) units
            for (i, u) in node_apps.iter().enumerate() {
                let a = node_agents[i * node_agents.len() / apps];
                binding.insert(*u, a);
                bound.get_mut(&a).expect("agent registered").push(*u);
            }
            units.extend(&node_apps);
            units.extend(&node_agents);
            agents_by_node.push(node_agents);
            apps_by_node.push(node_apps);
        }
        Ok(Topology {
            nodes: cfg.nodes,
            units,
            agents_by_node,
            apps_by_node,
            binding,
            bound,
        })
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    /// Every unit, indexed by global rank.
    pub fn units(&self) -> &[UnitId] {
        &self.units
    }

    pub fn unit(&self, rank: u32) -> Option<UnitId> {
        self.units.get(rank as usize).copied()
    }

    pub fn agents(&self) -> impl Iterator<Item = UnitId> + '_ {
        self.agents_by_node.iter().flatten().copied()
    }

    pub fn agents_on(&self, node: u32) -> &[UnitId] {
        &self.agents_by_node[node as usize]
    }

    pub fn apps_on(&self, node: u32) -> &[UnitId] {
        &self.apps_by_node[node as usize]
    }

    pub fn app_units(&self) -> impl Iterator<Item = UnitId> + '_ {
        self.apps_by_node.iter().flatten().copied()
    }

    /// The progress agent serving `origin`. `_op_index` is accepted for
    /// per-operation policies; the static binding ignores it.
    pub fn agent_for(&self, origin: UnitId, _op_index: u64) -> Result<UnitId> {
        if origin.is_agent() {
            return Err(Error::Usage(format!(
                "{origin} is a progress agent and has no agent of its own"
            )));
        }
        self.binding
            .get(&origin)
            .copied()
            .ok_or_else(|| Error::Usage(format!("unknown unit {origin:?}")))
    }

    /// Application units bound to `agent`.
    pub fn bound_to(&self, agent: UnitId) -> &[UnitId] {
        self.bound.get(&agent).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Unit that exchanges shutdown messages with `agent`: its lowest bound
    /// origin, or the lowest application unit on its node.
    pub fn home_of(&self, agent: UnitId) -> UnitId {
        self.bound_to(agent)
            .first()
            .copied()
            .unwrap_or_else(|| self.apps_on(agent.node())[0])
    }

    pub fn team_all(&self) -> Team {
        Team {
            id: TEAM_ALL,
            index: 0,
            members: self.app_units().collect::<Vec<_>>().into(),
        }
    }
}

pub(crate) struct HandleInfo {
    pub(crate) segid: u32,
}

pub(crate) struct Shared {
    pub(crate) config: Config,
    pub(crate) topology: Topology,
    pub(crate) transport: Transport,
    pub(crate) memory: Memory,
    pub(crate) collectives: Collectives,
    pub(crate) handles: Mutex<BTreeMap<HandleId, HandleInfo>>,
    pub(crate) teams: Mutex<HashMap<u32, Team>>,
    next_team: AtomicU32,
    pub(crate) counters: BTreeMap<UnitId, Arc<AgentCounters>>,
}

impl Shared {
    pub(crate) fn team(&self, index: u32) -> Result<Team> {
        self.teams
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .get(&index)
            .cloned()
            .ok_or_else(|| Error::Argument(format!("unknown team index {index}")))
    }

    pub(crate) fn outstanding_handles(&self, segid: Option<u32>) -> Vec<HandleId> {
        self.handles
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .iter()
            .filter(|(_, info)| segid.map_or(true, |s| info.segid == s))
            .map(|(id, _)| *id)
            .collect()
    }
}

/// The context of one application unit. All one-sided operations are
/// methods on `Unit` and must be called from the thread that owns it.
pub struct Unit {
    pub(crate) shared: Arc<Shared>,
    pub(crate) id: UnitId,
    pub(crate) agent: UnitId,
    pub(crate) next_seq: u64,
}

impl fmt::Debug for Unit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Unit")
            .field("id", &self.id)
            .field("agent", &self.agent)
            .finish()
    }
}

impl Unit {
    pub fn id(&self) -> UnitId {
        self.id
    }

    /// Progress agent this unit is bound to.
    pub fn agent(&self) -> UnitId {
        self.agent
    }

    pub fn config(&self) -> &Config {
        &self.shared.config
    }

    pub fn mode(&self) -> ProgressMode {
        self.shared.config.mode
    }

    pub fn topology(&self) -> &Topology {
        &self.shared.topology
    }

    pub fn transport(&self) -> &Transport {
        &self.shared.transport
    }

    pub fn team_all(&self) -> Team {
        self.shared.topology.team_all()
    }

    pub fn agent_metrics(&self, agent: UnitId) -> Option<AgentMetrics> {
        self.shared.counters.get(&agent).map(|c| c.snapshot())
    }

    pub fn local_alloc(&self, nbytes: usize) -> Result<GlobalPtr> {
        self.shared.memory.local_alloc(self.id, nbytes)
    }

    pub fn local_free(&self, gptr: GlobalPtr) -> Result<()> {
        if gptr.unit != self.id {
            return Err(Error::Argument(format!("{gptr} is not owned by {}", self.id)));
        }
        self.shared.memory.local_free(gptr)
    }

    pub fn region_remaining(&self) -> usize {
        self.shared.memory.region_remaining(self.id)
    }

    /// Resolves `len` bytes at `gptr` from this unit's point of view.
    pub fn resolve(&self, gptr: GlobalPtr, len: usize) -> Result<LocalView> {
        self.shared.memory.resolve(gptr, self.id, len)
    }

    /// Reads bytes of this node's memory directly.
    pub fn read_local(&self, gptr: GlobalPtr, len: usize) -> Result<Vec<u8>> {
        match self.resolve(gptr, len)? {
            LocalView::Direct(v) => Ok(v.read()),
            LocalView::Remote(_) => Err(Error::Argument(format!("{gptr} is not on this node"))),
        }
    }

    /// Writes bytes of this node's memory directly.
    pub fn write_local(&self, gptr: GlobalPtr, data: &[u8]) -> Result<()> {
        match self.resolve(gptr, data.len())? {
            LocalView::Direct(v) => v.write(data),
            LocalView::Remote(_) => Err(Error::Argument(format!("{gptr} is not on this node"))),
        }
    }

    fn require_member(&self, team: &Team) -> Result<()> {
        if !team.contains(self.id) {
            return Err(Error::Usage(format!(
                "{} is not a member of team {}",
                self.id,
                team.id()
            )));
        }
        Ok(())
    }

    /// Blocks until every member of `team` has arrived.
    pub fn barrier(&self, team: &Team) -> Result<()> {
        self.require_member(team)?;
        self.shared
            .collectives
            .point(team.index())
            .arrive(
                self.id.rank(),
                team.len(),
                self.shared.config.collective_timeout,
                "barrier",
                || Ok(0),
            )
            .map(|_| ())
    }

    /// Collective allocation of `nbytes_per_unit` on every member of `team`.
    /// The lowest-ranked member on each node tells that node's agents, which
    /// join with a zero-byte portion and open their access epoch.
    pub fn team_alloc_aligned(&self, team: &Team, nbytes_per_unit: usize) -> Result<GlobalPtr> {
        self.require_member(team)?;
        if nbytes_per_unit == 0 {
            return Err(Error::Argument("allocation size must be positive".into()));
        }
        let sh = &self.shared;
        let timeout = sh.config.collective_timeout;
        let segid = sh.collectives.point(team.index()).arrive(
            self.id.rank(),
            team.len(),
            timeout,
            "team_alloc_aligned",
            || {
                sh.memory
                    .begin_alloc(team, nbytes_per_unit, &sh.topology)
                    .map(u64::from)
            },
        )? as u32;
        self.notify_agents(team, Tag::Alloc)?;
        sh.memory.wait_live(segid, timeout)?;
        Ok(GlobalPtr {
            unit: self.id,
            segid,
            index: team.index(),
            offset: 0,
        })
    }

    /// Collective release of the segment `gptr` points into.
    pub fn team_free(&self, gptr: GlobalPtr) -> Result<()> {
        if gptr.segid == 0 {
            return Err(Error::Argument(
                "team_free on the reserved region; use local_free".into(),
            ));
        }
        let sh = &self.shared;
        sh.memory.check_live(gptr.segid, gptr.index)?;
        let busy = sh.outstanding_handles(Some(gptr.segid));
        if !busy.is_empty() {
            return Err(Error::OutstandingHandles(busy));
        }
        let team = sh.team(gptr.index)?;
        self.require_member(&team)?;
        let timeout = sh.config.collective_timeout;
        sh.collectives.point(team.index()).arrive(
            self.id.rank(),
            team.len(),
            timeout,
            "team_free",
            || {
                sh.memory
                    .begin_free(gptr.segid, gptr.index, &sh.topology)
                    .map(u64::from)
            },
        )?;
        self.notify_agents(&team, Tag::Free)?;
        sh.memory.wait_retired(gptr.segid, timeout)
    }

    fn notify_agents(&self, team: &Team, tag: Tag) -> Result<()> {
        if team.leader_on(self.id.node()) != Some(self.id) {
            return Ok(());
        }
        for &agent in self.shared.topology.agents_on(self.id.node()) {
            self.shared.transport.send_ctrl(CtrlMessage {
                src: self.id,
                dst: agent,
                tag,
                payload: team.index().to_le_bytes().to_vec(),
            })?;
        }
        Ok(())
    }
}

/// Outcome of a clean shutdown.
#[derive(Debug, Clone)]
pub struct FinalizeReport {
    pub exit_acks: usize,
    pub agent_metrics: BTreeMap<UnitId, AgentMetrics>,
}

pub struct Runtime {
    shared: Arc<Shared>,
    units: Vec<Unit>,
    agents: Vec<(UnitId, JoinHandle<()>)>,
    done: bool,
}

impl fmt::Debug for Runtime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Runtime")
            .field("config", &self.shared.config)
            .field("units", &self.units.len())
            .field("agents", &self.agents.len())
            .finish()
    }
}

impl Runtime {
    /// Builds the machine, starts every progress agent, and reserves each
    /// application unit's non-collective region.
    pub fn init(config: Config) -> Result<Runtime> {
        let topology = Topology::build(&config)?;
        let cost = CostModel {
            latency: config.net_latency,
            bandwidth: config.net_bandwidth,
            dilation: config.time_dilation,
        };
        let transport = Transport::new(
            topology.units().to_vec(),
            topology.nodes(),
            cost,
            config.transcript,
        )?;
        let memory = Memory::new(&topology, config.region_bytes);
        let team_all = topology.team_all();
        let counters = topology
            .agents()
            .map(|a| (a, Arc::new(AgentCounters::default())))
            .collect();
        let shared = Arc::new(Shared {
            config,
            transport,
            memory,
            collectives: Collectives::default(),
            handles: Mutex::new(BTreeMap::new()),
            teams: Mutex::new(HashMap::from([(team_all.index(), team_all)])),
            next_team: AtomicU32::new(1),
            counters,
            topology,
        });

        let mut rt = Runtime {
            shared: shared.clone(),
            units: Vec::new(),
            agents: Vec::new(),
            done: false,
        };
        for agent in shared.topology.agents().collect::<Vec<_>>() {
            let worker = Agent::new(shared.clone(), agent);
            let spawned = std::thread::Builder::new()
                .name(format!("agent-{}", agent.rank()))
                .spawn(move || worker.run());
            match spawned {
                Ok(h) => rt.agents.push((agent, h)),
                Err(e) => {
                    // rt's Drop stops the agents already running
                    return Err(Error::Startup {
                        unit: agent.rank(),
                        reason: e.to_string(),
                    });
                }
            }
        }
        rt.units = shared
            .topology
            .app_units()
            .map(|u| Unit {
                shared: shared.clone(),
                id: u,
                agent: shared.topology.agent_for(u, 0).expect("application unit"),
                next_seq: 0,
            })
            .collect();
        Ok(rt)
    }

    pub fn config(&self) -> &Config {
        &self.shared.config
    }

    pub fn topology(&self) -> &Topology {
        &self.shared.topology
    }

    pub fn transport(&self) -> &Transport {
        &self.shared.transport
    }

    pub fn team_all(&self) -> Team {
        self.shared.topology.team_all()
    }

    /// Registers a team over `members`. Progress agents are rejected.
    pub fn team_create(&self, members: &[UnitId]) -> Result<Team> {
        let mut ms: Vec<UnitId> = members.to_vec();
        ms.sort();
        ms.dedup();
        if ms.is_empty() {
            return Err(Error::Argument("a team needs at least one member".into()));
        }
        for m in &ms {
            if self.shared.topology.unit(m.rank()) != Some(*m) {
                return Err(Error::Argument(format!("unknown unit {m:?}")));
            }
            if m.is_agent() {
                return Err(Error::Usage(format!(
                    "{m} is a progress agent and cannot join a team"
                )));
            }
        }
        let id = self.shared.next_team.fetch_add(1, Ordering::Relaxed);
        let team = Team {
            id,
            index: id,
            members: ms.into(),
        };
        self.shared
            .teams
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .insert(id, team.clone());
        Ok(team)
    }

    pub fn teams(&self) -> Vec<Team> {
        let teams = self.shared.teams.lock().unwrap_or_else(|e| e.into_inner());
        let mut v: Vec<Team> = teams.values().cloned().collect();
        v.sort_by_key(Team::id);
        v
    }

    pub fn agent_for(&self, origin: UnitId, op_index: u64) -> Result<UnitId> {
        self.shared.topology.agent_for(origin, op_index)
    }

    /// Application unit contexts, in rank order.
    pub fn units_mut(&mut self) -> &mut [Unit] {
        &mut self.units
    }

    pub fn unit_mut(&mut self, i: usize) -> &mut Unit {
        &mut self.units[i]
    }

    /// Runs `f` on every application unit concurrently, one thread each, and
    /// returns the results in rank order.
    pub fn run<F, R>(&mut self, f: F) -> Vec<R>
    where
        F: Fn(&mut Unit) -> R + Sync,
        R: Send,
    {
        let f = &f;
        std::thread::scope(|s| {
            let hs: Vec<_> = self
                .units
                .iter_mut()
                .map(|u| {
                    std::thread::Builder::new()
                        .name(format!("unit-{}", u.id.rank()))
                        .spawn_scoped(s, move || f(u))
                        .expect("spawn unit thread")
                })
                .collect();
            hs.into_iter()
                .map(|h| h.join().unwrap_or_else(|p| std::panic::resume_unwind(p)))
                .collect()
        })
    }

    pub fn resolve(&self, gptr: GlobalPtr, accessor: UnitId, len: usize) -> Result<LocalView> {
        self.shared.memory.resolve(gptr, accessor, len)
    }

    /// Reads target memory directly, bypassing the transport.
    pub fn peek(&self, gptr: GlobalPtr, len: usize) -> Result<Vec<u8>> {
        let v = self.shared.memory.resolve(gptr, gptr.unit, len)?;
        Ok(v.direct().expect("owner view is direct").read())
    }

    /// Writes target memory directly, bypassing the transport.
    pub fn poke(&self, gptr: GlobalPtr, data: &[u8]) -> Result<()> {
        let v = self.shared.memory.resolve(gptr, gptr.unit, data.len())?;
        v.direct().expect("owner view is direct").write(data)
    }

    pub fn segment(&self, segid: u32) -> Option<SegmentInfo> {
        self.shared.memory.segment(segid)
    }

    pub fn segments(&self) -> Vec<SegmentInfo> {
        self.shared.memory.segments()
    }

    /// Highest segment id handed out so far.
    pub fn last_segid(&self) -> u32 {
        self.shared.memory.last_segid()
    }

    pub fn dump_segments(&self) -> String {
        self.shared.memory.dump()
    }

    pub fn transcript(&self) -> Vec<LogEntry> {
        self.shared.transport.transcript()
    }

    pub fn clear_transcript(&self) {
        self.shared.transport.clear_transcript()
    }

    pub fn agent_metrics(&self, agent: UnitId) -> Option<AgentMetrics> {
        self.shared.counters.get(&agent).map(|c| c.snapshot())
    }

    pub fn outstanding_handles(&self) -> Vec<HandleId> {
        self.shared.outstanding_handles(None)
    }

    /// Stops every agent and releases the runtime. Outstanding handles are
    /// reported as an error, after the agents have been shut down anyway.
    pub fn finalize(mut self) -> Result<FinalizeReport> {
        let leaked = self.shared.outstanding_handles(None);
        let report = self.shutdown()?;
        if !leaked.is_empty() {
            return Err(Error::LeakedHandles(leaked));
        }
        Ok(report)
    }

    fn shutdown(&mut self) -> Result<FinalizeReport> {
        if self.done {
            return Err(Error::Usage("runtime already finalized".into()));
        }
        self.done = true;
        let sh = &self.shared;
        let topo = &sh.topology;
        let mut first_err = None;
        for agent in topo.agents() {
            let senders: Vec<UnitId> = match topo.bound_to(agent) {
                [] => vec![topo.home_of(agent)],
                b => b.to_vec(),
            };
            for src in senders {
                let sent = sh.transport.send_ctrl(CtrlMessage {
                    src,
                    dst: agent,
                    tag: Tag::Exit,
                    payload: Vec::new(),
                });
                if let Err(e) = sent {
                    first_err.get_or_insert(e);
                }
            }
        }
        let mut exit_acks = 0;
        for agent in topo.agents() {
            match sh.transport.recv_ctrl(topo.home_of(agent), agent, Tag::Exit) {
                Ok(_) => exit_acks += 1,
                Err(e) => {
                    first_err.get_or_insert(e);
                }
            }
        }
        for (_, h) in self.agents.drain(..) {
            let _ = h.join();
        }
        sh.transport.shutdown();
        if let Some(e) = first_err {
            return Err(e);
        }
        Ok(FinalizeReport {
            exit_acks,
            agent_metrics: sh
                .counters
                .iter()
                .map(|(a, c)| (*a, c.snapshot()))
                .collect(),
        })
    }
}

impl Drop for Runtime {
    fn drop(&mut self) {
        if !self.done {
            let _ = self.shutdown();
        }
    }
}
