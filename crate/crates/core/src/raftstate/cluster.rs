use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{
    ClientId, ControlCommand, ElementState, MemberId, Payload, RaftConfig, RaftError, RaftGroup, RaftMessage, RaftWire,
    SafetyChecker, ServiceProfile, SwitchUpdate,
};
use crate::simnet::{
    Ctx, Envelope, LatencyStats, NodeConfig, NodeId, SimRng, Simulator, Topology, TopologySpec, VirtualTime, World,
};
use crate::telemetry::ElementId;

const CLIENT: ClientId = 0;
const KIND_ARRIVAL: u64 = 1 << 56;
const KIND_RETRY: u64 = 2 << 56;
const COMMIT_LABEL: &str = "raft.commit";
/// Pause before trying another member when no leader is known.
const REDIRECT_BACKOFF: VirtualTime = VirtualTime::from_micros(20);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrivalProcess {
    /// Evenly spaced requests.
    #[default]
    Deterministic,
    Poisson,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RaftClusterConfig {
    pub replicas: usize,
    /// Network elements with replicated state; element 0 is the switch the members hang off.
    pub elements: u32,
    pub link_latency_ns: u64,
    pub switch_latency_ns: u64,
    pub mac_serial_ns: u64,
    pub queue_capacity: usize,
    pub raft: RaftConfig,
    pub service: ServiceProfile,
    pub preferred_leader: Option<MemberId>,
    pub jitter_ns: u64,
    pub retry_timeout_ns: u64,
    pub arrivals: ArrivalProcess,
    pub seed: u64,
}

impl Default for RaftClusterConfig {
    fn default() -> Self {
        RaftClusterConfig {
            replicas: 3,
            elements: 1,
            link_latency_ns: 43,
            switch_latency_ns: 1,
            mac_serial_ns: 0,
            queue_capacity: crate::simnet::DEFAULT_QUEUE_CAPACITY,
            raft: RaftConfig::default(),
            service: ServiceProfile::calibrated(),
            preferred_leader: Some(0),
            jitter_ns: 0,
            retry_timeout_ns: 1_000_000,
            arrivals: ArrivalProcess::Deterministic,
            seed: 1,
        }
    }
}

impl RaftClusterConfig {
    pub fn validate(&self) -> Result<(), RaftError> {
        if self.replicas == 0 || self.replicas % 2 == 0 {
            return Err(RaftError::BadClusterSize(self.replicas));
        }
        if self.elements == 0 {
            return Err(RaftError::NonPositive("elements"));
        }
        if self.queue_capacity == 0 {
            return Err(RaftError::NonPositive("queue_capacity"));
        }
        if self.retry_timeout_ns == 0 {
            return Err(RaftError::NonPositive("retry_timeout_ns"));
        }
        self.raft.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitReceipt {
    pub request_id: u64,
    pub submitted_at: VirtualTime,
    pub committed_at: VirtualTime,
    pub latency: VirtualTime,
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadPoint {
    pub load_rps: u64,
    pub count: u64,
    pub completed: u64,
    /// Messages refused by full member queues.
    pub drops: u64,
    pub throughput_rps: f64,
    pub latency: LatencyStats,
}

#[derive(Debug, Clone)]
enum Msg {
    Raft(RaftWire),
    Switch(SwitchUpdate),
}

impl From<RaftWire> for Msg {
    fn from(w: RaftWire) -> Self {
        Msg::Raft(w)
    }
}

impl From<SwitchUpdate> for Msg {
    fn from(u: SwitchUpdate) -> Self {
        Msg::Switch(u)
    }
}

#[derive(Debug, Clone)]
struct Request {
    payload: Payload,
    submitted: VirtualTime,
    committed: Option<VirtualTime>,
    attempts: u32,
    generation: u32,
}

struct ClusterWorld {
    group: RaftGroup,
    client: NodeId,
    target: MemberId,
    retry: VirtualTime,
    requests: Vec<Request>,
    outstanding: usize,
    switch_log: BTreeMap<ElementId, Vec<(VirtualTime, u64)>>,
    switch_nodes: BTreeMap<NodeId, ElementId>,
}

impl ClusterWorld {
    fn send(&mut self, ctx: &mut Ctx<'_, Msg>, idx: usize) {
        let r = &mut self.requests[idx];
        r.attempts += 1;
        let msg = RaftMessage::ClientWrite { client_id: CLIENT, request_id: idx as u64, payload: r.payload.clone() };
        let bytes = msg.wire_bytes();
        ctx.send(self.group.host(self.target), RaftWire { from: None, msg }.into(), bytes);
        self.arm(ctx, idx, self.retry);
    }

    fn arm(&mut self, ctx: &mut Ctx<'_, Msg>, idx: usize, delay: VirtualTime) {
        let r = &mut self.requests[idx];
        r.generation += 1;
        ctx.set_timer(delay, KIND_RETRY | (u64::from(r.generation) << 32) | idx as u64);
    }

    fn on_reply(&mut self, ctx: &mut Ctx<'_, Msg>, request_id: u64, committed: bool, hint: Option<MemberId>) {
        let idx = request_id as usize;
        let Some(r) = self.requests.get_mut(idx) else { return };
        if r.committed.is_some() {
            return;
        }
        if committed {
            r.committed = Some(ctx.now());
            r.generation += 1;
            self.outstanding -= 1;
            let start = r.submitted;
            let now = ctx.now();
            if let Err(e) = ctx.stats().record_latency(COMMIT_LABEL, start, now) {
                ctx.fail(e);
            }
            return;
        }
        match hint {
            Some(h) if h != self.target => {
                self.target = h;
                self.send(ctx, idx);
            }
            _ => {
                self.target = (self.target + 1) % self.group.size() as MemberId;
                self.arm(ctx, idx, REDIRECT_BACKOFF);
            }
        }
    }
}

impl World for ClusterWorld {
    type Msg = Msg;

    fn on_message(&mut self, ctx: &mut Ctx<'_, Msg>, node: NodeId, env: Envelope<Msg>) {
        match env.msg {
            Msg::Raft(w) if node == self.client => {
                if let RaftMessage::ClientReply { request_id, committed, leader_hint } = w.msg {
                    self.on_reply(ctx, request_id, committed, leader_hint);
                }
            }
            Msg::Raft(w) => self.group.on_message(ctx, node, env.src, w),
            Msg::Switch(u) => {
                if self.switch_nodes.get(&node) == Some(&u.element) {
                    self.switch_log.entry(u.element).or_default().push((ctx.now(), u.index));
                }
            }
        }
    }

    fn on_timer(&mut self, ctx: &mut Ctx<'_, Msg>, node: NodeId, token: u64) {
        if RaftGroup::owns_timer(token) {
            self.group.on_timer(ctx, node, token);
            return;
        }
        let idx = (token & 0xffff_ffff) as usize;
        if token & KIND_ARRIVAL != 0 {
            self.send(ctx, idx);
        } else {
            let generation = ((token >> 32) & 0xff_ffff) as u32;
            let r = &self.requests[idx];
            if r.committed.is_none() && r.generation == generation {
                self.send(ctx, idx);
            }
        }
    }

    fn service_time(&self, node: NodeId, msg: &Msg) -> Option<VirtualTime> {
        match msg {
            Msg::Raft(w) if node != self.client => Some(self.group.service_time(node, w)),
            _ => Some(VirtualTime::ZERO),
        }
    }
}

/// A simulated Raft cluster on a star network, driven by one client.
pub struct RaftCluster {
    sim: Simulator<ClusterWorld>,
    cfg: RaftClusterConfig,
}

impl RaftCluster {
    pub fn new(cfg: RaftClusterConfig) -> Result<Self, RaftError> {
        cfg.validate()?;
        let mut spec = TopologySpec::default();
        spec.add_switch("sw0", cfg.switch_latency_ns);
        for i in 1..cfg.elements {
            let name = format!("sw{i}");
            spec.add_switch(&name, cfg.switch_latency_ns);
            spec.add_link(&name, "sw0", cfg.link_latency_ns);
        }
        let mut hosts: Vec<String> = (0..cfg.replicas).map(|i| format!("raft{i}")).collect();
        hosts.push("client0".into());
        for h in &hosts {
            spec.add_host(h);
            spec.add_link(h, "sw0", cfg.link_latency_ns);
        }
        let topo = Arc::new(Topology::build(&spec)?);
        let members = (0..cfg.replicas).map(|i| topo.node(&format!("raft{i}"))).collect::<Result<Vec<_>, _>>()?;
        let client = topo.node("client0")?;
        let elements: Vec<ElementId> = (0..cfg.elements).map(ElementId).collect();

        let mut group = RaftGroup::new(members.clone(), elements.clone(), cfg.raft, cfg.service, cfg.seed, cfg.preferred_leader);
        group.register_client(CLIENT, client);
        let mut switch_nodes = BTreeMap::new();
        for e in &elements {
            let n = topo.node(&e.to_string())?;
            group.register_switch(*e, n);
            switch_nodes.insert(n, *e);
        }
        let timers = group.initial_timers();
        let world = ClusterWorld {
            group,
            client,
            target: cfg.preferred_leader.unwrap_or(0),
            retry: VirtualTime::from_nanos(cfg.retry_timeout_ns),
            requests: Vec::new(),
            outstanding: 0,
            switch_log: BTreeMap::new(),
            switch_nodes,
        };
        let mut sim = Simulator::new(topo, world, cfg.seed);
        let node_cfg = NodeConfig::default().with_capacity(cfg.queue_capacity).with_mac_serial_ns(cfg.mac_serial_ns);
        for n in members.iter().chain([&client]) {
            sim.configure_node(*n, node_cfg);
        }
        sim.set_jitter(cfg.jitter_ns);
        for (n, at, token) in timers {
            sim.schedule_timer(at, n, token)?;
        }
        Ok(RaftCluster { sim, cfg })
    }

    pub fn config(&self) -> &RaftClusterConfig {
        &self.cfg
    }

    pub fn now(&self) -> VirtualTime {
        self.sim.now()
    }

    pub fn group(&self) -> &RaftGroup {
        &self.sim.world.group
    }

    pub fn leader(&self) -> Option<MemberId> {
        self.group().leader()
    }

    pub fn elements(&self) -> &[ElementId] {
        self.group().elements()
    }

    /// Run until a leader has committed in its own term.
    pub fn wait_for_leader(&mut self, timeout: VirtualTime) -> Result<MemberId, RaftError> {
        let deadline = self.now() + timeout;
        self.sim.run_until_pred(deadline, |w| w.group.ready_leader().is_some())?;
        let leader = self.group().ready_leader().ok_or(RaftError::NoLeader)?;
        self.sim.world.target = leader;
        Ok(leader)
    }

    pub fn run_for(&mut self, d: VirtualTime) -> Result<(), RaftError> {
        let t = self.now() + d;
        self.sim.run_until(t)?;
        Ok(())
    }

    /// Run for `d`, letting `checker` inspect the members after every event.
    pub fn run_checked(&mut self, d: VirtualTime, checker: &mut SafetyChecker) -> Result<(), RaftError> {
        let t = self.now() + d;
        self.sim.run_until_pred(t, |w| {
            checker.observe(&w.group);
            false
        })?;
        checker.check_log_matching(self.group());
        Ok(())
    }

    fn enqueue(&mut self, at: VirtualTime, payload: Payload) -> Result<u64, RaftError> {
        payload.validate(|e| e.0 < self.cfg.elements)?;
        let w = &mut self.sim.world;
        let idx = w.requests.len();
        w.requests.push(Request { payload, submitted: at, committed: None, attempts: 0, generation: 0 });
        w.outstanding += 1;
        let client = w.client;
        self.sim.schedule_timer(at, client, KIND_ARRIVAL | idx as u64)?;
        Ok(idx as u64)
    }

    /// Queue a write to be sent now. Malformed payloads are refused here,
    /// before anything reaches the cluster.
    pub fn submit(&mut self, payload: Payload) -> Result<u64, RaftError> {
        self.enqueue(self.now(), payload)
    }

    pub fn submit_at(&mut self, at: VirtualTime, payload: Payload) -> Result<u64, RaftError> {
        self.enqueue(at, payload)
    }

    pub fn receipt(&self, request_id: u64) -> Option<CommitReceipt> {
        let r = self.sim.world.requests.get(request_id as usize)?;
        let committed_at = r.committed?;
        Some(CommitReceipt {
            request_id,
            submitted_at: r.submitted,
            committed_at,
            latency: committed_at - r.submitted,
            attempts: r.attempts,
        })
    }

    pub fn wait_commit(&mut self, request_id: u64, timeout: VirtualTime) -> Result<CommitReceipt, RaftError> {
        let deadline = self.now() + timeout;
        let idx = request_id as usize;
        self.sim.run_until_pred(deadline, |w| w.requests[idx].committed.is_some())?;
        self.receipt(request_id).ok_or(RaftError::Timeout(deadline))
    }

    /// Submit and run until committed, giving up after 10 ms of virtual time.
    pub fn client_write(&mut self, payload: Payload) -> Result<CommitReceipt, RaftError> {
        let id = self.submit(payload)?;
        self.wait_commit(id, VirtualTime::from_millis(10))
    }

    pub fn kv_write(&mut self, element: ElementId, key: &[u8], value: &[u8]) -> Result<CommitReceipt, RaftError> {
        self.client_write(Payload::KvWrite { element, key: key.to_vec(), value: value.to_vec() })
    }

    pub fn control_write(&mut self, cmd: ControlCommand) -> Result<CommitReceipt, RaftError> {
        self.client_write(Payload::Control(cmd))
    }

    /// Committed state of one element as seen by the current leader.
    pub fn read_element_state(&self, e: ElementId) -> Result<ElementState, RaftError> {
        let leader = self.group().ready_leader().ok_or(RaftError::NoLeader)?;
        let node = self.group().node(leader).ok_or(RaftError::NoLeader)?;
        node.state_machine().element(e).cloned()
    }

    /// Applied commands received by an element's switch, as `(time, log index)`.
    pub fn switch_updates(&self, e: ElementId) -> &[(VirtualTime, u64)] {
        self.sim.world.switch_log.get(&e).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn crash(&mut self, m: MemberId) {
        self.sim.world.group.crash(m);
    }

    pub fn restart(&mut self, m: MemberId) -> Result<(), RaftError> {
        let now = self.now();
        if let Some((n, at, token)) = self.sim.world.group.restart(m, now) {
            self.sim.schedule_timer(at.max(now), n, token)?;
        }
        Ok(())
    }

    /// Messages refused by full member queues so far.
    pub fn drops(&self) -> u64 {
        (0..self.group().size() as MemberId).map(|m| self.sim.counters(self.group().host(m)).dropped).sum()
    }

    pub fn commit_latency(&self) -> LatencyStats {
        self.sim.stats().summary(COMMIT_LABEL)
    }

    /// Commit latency of a single write on an idle, elected cluster.
    pub fn no_load_latency(cfg: RaftClusterConfig) -> Result<VirtualTime, RaftError> {
        let mut c = RaftCluster::new(cfg)?;
        c.wait_for_leader(VirtualTime::from_millis(10))?;
        let e = ElementId(0);
        // warm-up write, then let its trailing replies drain
        c.kv_write(e, &[0; 16], &[0; 64])?;
        c.run_for(VirtualTime::from_micros(5))?;
        Ok(c.kv_write(e, &[1; 16], &[1; 64])?.latency)
    }

    /// Open-loop load: `count` writes at `rate_rps`, on a fresh cluster.
    pub fn measure_load(cfg: RaftClusterConfig, rate_rps: u64, count: u64) -> Result<LoadPoint, RaftError> {
        if rate_rps == 0 {
            return Err(RaftError::NonPositive("load_rps"));
        }
        let arrivals = cfg.arrivals;
        let seed = cfg.seed;
        let mut c = RaftCluster::new(cfg)?;
        c.wait_for_leader(VirtualTime::from_millis(10))?;
        c.run_for(VirtualTime::from_micros(5))?;
        let mut rng = SimRng::labeled(seed, "arrivals");
        let gap = VirtualTime::from_nanos(1_000_000_000 / rate_rps);
        let mut t = c.now();
        let first = t;
        for i in 0..count {
            let key = (i as u128).to_be_bytes();
            c.submit_at(t, Payload::kv(ElementId(0), key, [i as u8; 64]))?;
            t += match arrivals {
                ArrivalProcess::Deterministic => gap,
                ArrivalProcess::Poisson => rng.exponential(gap),
            };
        }
        let deadline = t + VirtualTime::from_millis(50);
        c.sim.run_until_pred(deadline, |w| w.outstanding == 0)?;
        let reqs = &c.sim.world.requests;
        let completed = reqs.iter().filter(|r| r.committed.is_some()).count() as u64;
        let last = reqs.iter().filter_map(|r| r.committed).max().unwrap_or(first);
        let span = (last - first).as_nanos().max(1) as f64;
        Ok(LoadPoint {
            load_rps: rate_rps,
            count,
            completed,
            drops: c.drops(),
            throughput_rps: completed as f64 * 1e9 / span,
            latency: c.commit_latency(),
        })
    }

    pub fn load_sweep(cfg: &RaftClusterConfig, rates: &[u64], count: u64) -> Result<Vec<LoadPoint>, RaftError> {
        rates.iter().map(|&r| RaftCluster::measure_load(cfg.clone(), r, count)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::super::{ControlOp, Role};
    use super::*;
    use crate::telemetry::tests::flow;

    fn zero(switch_ns: u64) -> RaftClusterConfig {
        RaftClusterConfig { service: ServiceProfile::zero(), switch_latency_ns: switch_ns, ..Default::default() }
    }

    #[test]
    fn unloaded_latency_is_four_traversals() {
        assert_eq!(RaftCluster::no_load_latency(zero(1)).unwrap().as_nanos(), 348);
        assert_eq!(RaftCluster::no_load_latency(zero(300)).unwrap().as_nanos(), 1544);
    }

    #[test]
    fn calibrated_unloaded_latency() {
        let cfg = RaftClusterConfig::default();
        assert_eq!(RaftCluster::no_load_latency(cfg.clone()).unwrap().as_nanos(), 1880);
        let slow = RaftClusterConfig { switch_latency_ns: 300, ..cfg };
        assert_eq!(RaftCluster::no_load_latency(slow).unwrap().as_nanos(), 3076);
    }

    #[test]
    fn preferred_leader_wins() {
        let mut c = RaftCluster::new(RaftClusterConfig { preferred_leader: Some(2), ..Default::default() }).unwrap();
        assert_eq!(c.wait_for_leader(VirtualTime::from_millis(1)).unwrap(), 2);
    }

    #[test]
    fn control_write_reaches_switch_then_state() {
        let mut c = RaftCluster::new(RaftClusterConfig { elements: 2, ..Default::default() }).unwrap();
        c.wait_for_leader(VirtualTime::from_millis(1)).unwrap();
        let cmd = ControlCommand { target: ElementId(1), op: ControlOp::SetForwarding { flow: flow(3), egress_port: 2 } };
        let rc = c.control_write(cmd).unwrap();
        let st = c.read_element_state(ElementId(1)).unwrap();
        assert_eq!(st.forwarding_table[&flow(3)], 2);
        let ups = c.switch_updates(ElementId(1));
        assert_eq!(ups.len(), 1);
        assert!(ups[0].0 <= rc.committed_at);
        assert!(c.switch_updates(ElementId(0)).is_empty());
    }

    #[test]
    fn malformed_write_never_sent() {
        let mut c = RaftCluster::new(RaftClusterConfig::default()).unwrap();
        c.wait_for_leader(VirtualTime::from_millis(1)).unwrap();
        let before = c.group().node(0).unwrap().last_index();
        assert_eq!(c.kv_write(ElementId(0), &[0; 15], &[0; 64]).unwrap_err(), RaftError::BadKeyLength(15));
        assert_eq!(c.kv_write(ElementId(4), &[0; 16], &[0; 64]).unwrap_err(), RaftError::UnknownElement(ElementId(4)));
        c.run_for(VirtualTime::from_micros(100)).unwrap();
        assert_eq!(c.group().node(0).unwrap().last_index(), before);
    }

    #[test]
    fn leader_crash_fails_over() {
        let mut c = RaftCluster::new(RaftClusterConfig::default()).unwrap();
        let old = c.wait_for_leader(VirtualTime::from_millis(1)).unwrap();
        c.kv_write(ElementId(0), &[7; 16], &[7; 64]).unwrap();
        c.crash(old);
        let crash_at = c.now();
        let new = c.wait_for_leader(VirtualTime::from_millis(5)).unwrap();
        assert_ne!(new, old);
        assert!(c.now() - crash_at <= VirtualTime::from_micros(650));
        // committed data survives, and the cluster takes writes again
        assert_eq!(c.read_element_state(ElementId(0)).unwrap().kv[&vec![7u8; 16]], vec![7u8; 64]);
        c.kv_write(ElementId(0), &[8; 16], &[8; 64]).unwrap();
        c.restart(old).unwrap();
        c.run_for(VirtualTime::from_millis(1)).unwrap();
        let back = c.group().node(old).unwrap();
        assert_eq!(back.role(), Role::Follower);
        assert_eq!(back.state_machine().element(ElementId(0)).unwrap().kv.len(), 2);
    }

    #[test]
    fn client_redirected_from_follower() {
        let mut c = RaftCluster::new(RaftClusterConfig::default()).unwrap();
        c.wait_for_leader(VirtualTime::from_millis(1)).unwrap();
        c.sim.world.target = 1;
        let rc = c.kv_write(ElementId(0), &[1; 16], &[1; 64]).unwrap();
        assert_eq!(rc.attempts, 2);
        assert_eq!(c.sim.world.target, 0);
    }

    #[test]
    fn knee_near_half_million() {
        let cfg = RaftClusterConfig::default();
        let below = RaftCluster::measure_load(cfg.clone(), 450_000, 10_000).unwrap();
        assert_eq!(below.completed, 10_000);
        assert!(below.latency.p99_ns <= 4_500, "p99 {}", below.latency.p99_ns);
        let above = RaftCluster::measure_load(cfg, 510_000, 10_000).unwrap();
        assert!(above.drops > 0 || above.latency.p99_ns > 10_000, "{above:?}");
    }

    #[test]
    fn randomized_runs_stay_safe() {
        for seed in 0..20 {
            let cfg = RaftClusterConfig { seed, jitter_ns: 2_000, preferred_leader: None, ..Default::default() };
            let mut c = RaftCluster::new(cfg).unwrap();
            let mut chk = SafetyChecker::new();
            let mut rng = SimRng::new(seed);
            for round in 0..6u8 {
                for i in 0..5u8 {
                    c.submit(Payload::kv(ElementId(0), [round; 16], [i; 64])).unwrap();
                }
                c.run_checked(VirtualTime::from_micros(300), &mut chk).unwrap();
                if let Some(l) = c.leader() {
                    if rng.chance(0.5) {
                        c.crash(l);
                        c.run_checked(VirtualTime::from_micros(400), &mut chk).unwrap();
                        c.restart(l).unwrap();
                    }
                }
            }
            c.run_checked(VirtualTime::from_millis(3), &mut chk).unwrap();
            assert!(chk.is_safe(), "seed {seed}: {:?}", chk.violations());
            assert!(chk.committed_len() > 0);
        }
    }
}
