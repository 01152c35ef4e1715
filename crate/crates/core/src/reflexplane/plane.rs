use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use super::{
    PlaneConfig, PlaneError, ReflexTrace, RunReport, STAGE_CLASSIFY, STAGE_COMMIT, STAGE_DIRECT, STAGE_E2E,
    STAGE_MONITOR,
};
use crate::classifier::{
    dispatch, shard_of_key, shard_ruleset, Action, ClassKey, ClassifierEngine, FieldMatcher, MonitorId,
    ProjectedReport, ReportFields, Rule, RuleSet, Schema, ShardMode, FIELD_COUNT,
};
use crate::monitors::{Monitor, ReflexCommand};
use crate::raftstate::{
    ClientId, CommitReceipt, ControlCommand, ElementState, MemberId, Payload, RaftGroup, RaftMessage, RaftWire,
    SwitchUpdate,
};
use crate::simnet::{
    Ctx, Envelope, LatencyStats, NodeConfig, NodeId, Simulator, Topology, TopologySpec, VirtualTime, World,
};
use crate::telemetry::{dedup_coalesce, ElementId, IntReport, DEFAULT_DEDUP_WINDOW, HOP_RECORD_BYTES};

const KIND_RETRY: u64 = 1 << 56;
const KIND_CONTROL: u64 = 2 << 56;
const CONTROL_CLIENT: ClientId = 0;
const REDIRECT_BACKOFF: VirtualTime = VirtualTime::from_micros(20);

#[derive(Debug, Clone)]
enum Msg {
    Report { id: u64, report: IntReport },
    Projected { id: u64, ingress: VirtualTime, classified: VirtualTime, report: ProjectedReport },
    Raft(RaftWire),
    Switch(SwitchUpdate),
    Direct(ReflexCommand),
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

/// A write some node is trying to get committed.
#[derive(Debug, Clone)]
struct Pending {
    payload: Payload,
    generation: u32,
    attempts: u32,
    done: Option<VirtualTime>,
}

/// Client side of the Raft interface, shared by monitors and the control stub.
#[derive(Debug, Clone)]
struct Writer {
    client: ClientId,
    target: MemberId,
    pending: Vec<Pending>,
}

impl Writer {
    fn new(client: ClientId, target: MemberId) -> Self {
        Writer { client, target, pending: Vec::new() }
    }
}

struct MonitorNode {
    monitor: Monitor,
    writer: Writer,
}

#[derive(Default)]
struct RunCounters {
    classified: u64,
    unmatched: u64,
    monitor_processed: u64,
    monitor_errors: u64,
    commands: u64,
    invalid_commands: u64,
    switch_updates: u64,
    first_done: Option<VirtualTime>,
    last_done: VirtualTime,
}

struct PlaneWorld {
    group: RaftGroup,
    classifiers: Vec<(NodeId, ClassifierEngine)>,
    monitors: HashMap<NodeId, MonitorNode>,
    monitor_nodes: HashMap<MonitorId, NodeId>,
    switches: HashMap<NodeId, ElementId>,
    switch_nodes: BTreeMap<ElementId, NodeId>,
    control: (NodeId, Writer),
    classifier_service: VirtualTime,
    monitor_service: VirtualTime,
    direct: bool,
    retry: VirtualTime,
    elements: u32,
    traces: BTreeMap<u64, ReflexTrace>,
    counters: RunCounters,
}

fn report_bytes(hops: usize) -> u32 {
    16 + (hops * HOP_RECORD_BYTES) as u32
}

impl PlaneWorld {
    fn writer(&mut self, node: NodeId) -> Option<&mut Writer> {
        if node == self.control.0 {
            return Some(&mut self.control.1);
        }
        self.monitors.get_mut(&node).map(|m| &mut m.writer)
    }

    fn send_write(&mut self, ctx: &mut Ctx<'_, Msg>, node: NodeId, idx: usize) {
        let retry = self.retry;
        let Some(w) = self.writer(node) else { return };
        let p = &mut w.pending[idx];
        p.generation += 1;
        p.attempts += 1;
        let token = KIND_RETRY | (u64::from(p.generation) << 32) | idx as u64;
        let msg = RaftMessage::ClientWrite { client_id: w.client, request_id: idx as u64, payload: p.payload.clone() };
        let dst = w.target;
        let bytes = msg.wire_bytes();
        ctx.send(self.group.host(dst), RaftWire { from: None, msg }.into(), bytes);
        ctx.set_timer(retry, token);
    }

    fn on_reply(&mut self, ctx: &mut Ctx<'_, Msg>, node: NodeId, request_id: u64, committed: bool, hint: Option<MemberId>) {
        let size = self.group.size() as MemberId;
        let now = ctx.now();
        let Some(w) = self.writer(node) else { return };
        let idx = request_id as usize;
        let Some(p) = w.pending.get_mut(idx) else { return };
        if p.done.is_some() {
            return;
        }
        if committed {
            p.done = Some(now);
            p.generation += 1;
            return;
        }
        match hint {
            Some(h) if h != w.target => {
                w.target = h;
                self.send_write(ctx, node, idx);
            }
            _ => {
                w.target = (w.target + 1) % size;
                p.generation += 1;
                ctx.set_timer(REDIRECT_BACKOFF, KIND_RETRY | (u64::from(p.generation) << 32) | idx as u64);
            }
        }
    }

    fn on_report(&mut self, ctx: &mut Ctx<'_, Msg>, node: NodeId, env_nic: VirtualTime, id: u64, report: IntReport) {
        let Some((_, engine)) = self.classifiers.iter().find(|(n, _)| *n == node) else { return };
        let now = ctx.now();
        if let Err(e) = ctx.stats().record_latency(STAGE_CLASSIFY, env_nic, now) {
            ctx.fail(e);
        }
        self.counters.classified += 1;
        let matched = engine.classify_report(&report);
        let copies = dispatch(&report, matched);
        if copies.is_empty() {
            self.counters.unmatched += 1;
        }
        for (mid, projected) in copies {
            let dst = self.monitor_nodes[&mid];
            let bytes = report_bytes(projected.hops.len());
            ctx.send(dst, Msg::Projected { id, ingress: env_nic, classified: now, report: projected }, bytes);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn on_projected(
        &mut self,
        ctx: &mut Ctx<'_, Msg>,
        node: NodeId,
        nic: VirtualTime,
        id: u64,
        ingress: VirtualTime,
        classified: VirtualTime,
        report: ProjectedReport,
    ) {
        let now = ctx.now();
        if let Err(e) = ctx.stats().record_latency(STAGE_MONITOR, nic, now) {
            ctx.fail(e);
        }
        self.counters.monitor_processed += 1;
        self.counters.first_done.get_or_insert(now);
        self.counters.last_done = now;
        let Some(m) = self.monitors.get_mut(&node) else { return };
        let cmds = match m.monitor.observe(&report, now) {
            Ok(c) => c,
            Err(_) => {
                self.counters.monitor_errors += 1;
                return;
            }
        };
        let egress = ctx.egress_time();
        for cmd in cmds {
            self.counters.commands += 1;
            if cmd.target_element.0 >= self.elements {
                self.counters.invalid_commands += 1;
                continue;
            }
            if let Err(e) = ctx.stats().record_latency(STAGE_DIRECT, nic, egress) {
                ctx.fail(e);
            }
            self.traces.insert(
                cmd.command_id,
                ReflexTrace {
                    command_id: cmd.command_id,
                    report_id: id,
                    monitor: cmd.origin.clone(),
                    kind: cmd.body.kind().to_string(),
                    flow: cmd.body.flow(),
                    target: cmd.target_element,
                    report_ingress: ingress,
                    classify_done: classified,
                    monitor_ingress: nic,
                    monitor_decision: now,
                    monitor_egress: egress,
                    raft_commit: None,
                    switch_arrival: None,
                },
            );
            if self.direct {
                let dst = self.switch_nodes[&cmd.target_element];
                ctx.send(dst, Msg::Direct(cmd), 64);
            } else {
                let m = self.monitors.get_mut(&node).expect("monitor node");
                m.writer.pending.push(Pending { payload: Payload::Reflex(cmd), generation: 0, attempts: 0, done: None });
                let idx = m.writer.pending.len() - 1;
                self.send_write(ctx, node, idx);
            }
        }
    }

    fn on_switch(&mut self, ctx: &mut Ctx<'_, Msg>, node: NodeId, sent_at: VirtualTime, cmd: Option<&ReflexCommand>, via_raft: bool) {
        self.counters.switch_updates += 1;
        let Some(cmd) = cmd else { return };
        if self.switches.get(&node) != Some(&cmd.target_element) {
            return;
        }
        let now = ctx.now();
        let Some(t) = self.traces.get_mut(&cmd.command_id) else { return };
        if t.switch_arrival.is_some() {
            return;
        }
        t.switch_arrival = Some(now);
        let (ingress, decision) = (t.report_ingress, t.monitor_decision);
        if via_raft {
            t.raft_commit = Some(sent_at);
            if let Err(e) = ctx.stats().record_latency(STAGE_COMMIT, decision, sent_at) {
                ctx.fail(e);
            }
        }
        if let Err(e) = ctx.stats().record_latency(STAGE_E2E, ingress, now) {
            ctx.fail(e);
        }
    }
}

impl World for PlaneWorld {
    type Msg = Msg;

    fn on_message(&mut self, ctx: &mut Ctx<'_, Msg>, node: NodeId, env: Envelope<Msg>) {
        let nic = env.nic_arrival;
        match env.msg {
            Msg::Report { id, report } => self.on_report(ctx, node, nic, id, report),
            Msg::Projected { id, ingress, classified, report } => {
                self.on_projected(ctx, node, nic, id, ingress, classified, report)
            }
            Msg::Raft(w) => {
                if self.group.member_at(node).is_some() {
                    self.group.on_message(ctx, node, env.src, w);
                } else if let RaftMessage::ClientReply { request_id, committed, leader_hint } = w.msg {
                    self.on_reply(ctx, node, request_id, committed, leader_hint);
                }
            }
            Msg::Switch(u) => {
                let cmd = match &u.payload {
                    Payload::Reflex(c) => Some(c),
                    _ => None,
                };
                self.on_switch(ctx, node, env.sent_at, cmd, true);
            }
            Msg::Direct(cmd) => self.on_switch(ctx, node, env.sent_at, Some(&cmd), false),
        }
    }

    fn on_timer(&mut self, ctx: &mut Ctx<'_, Msg>, node: NodeId, token: u64) {
        if RaftGroup::owns_timer(token) {
            self.group.on_timer(ctx, node, token);
            return;
        }
        let idx = (token & 0xffff_ffff) as usize;
        let generation = ((token >> 32) & 0xff_ffff) as u32;
        if token & KIND_CONTROL != 0 {
            self.send_write(ctx, node, idx);
            return;
        }
        let Some(w) = self.writer(node) else { return };
        let live = w.pending.get(idx).is_some_and(|p| p.done.is_none() && p.generation == generation);
        if live {
            self.send_write(ctx, node, idx);
        }
    }

    fn service_time(&self, node: NodeId, msg: &Msg) -> Option<VirtualTime> {
        Some(match msg {
            Msg::Report { .. } => self.classifier_service,
            Msg::Projected { .. } => self.monitor_service,
            Msg::Raft(w) if self.group.member_at(node).is_some() => self.group.service_time(node, w),
            _ => VirtualTime::ZERO,
        })
    }
}

/// A built reflex plane ready to take reports.
pub struct Plane {
    sim: Simulator<PlaneWorld>,
    cfg: PlaneConfig,
}

/// Single catch-all rule sending full reports to every monitor.
fn default_rules(cfg: &PlaneConfig) -> RuleSet {
    let rule = Rule {
        rule_id: 0,
        priority: 0,
        matchers: vec![FieldMatcher::Wildcard; FIELD_COUNT],
        action: Action { destinations: cfg.monitors.iter().map(|m| m.id().clone()).collect(), projection: ReportFields::all() },
    };
    RuleSet::new(Schema::reflex(), vec![rule]).expect("catch-all rule is valid")
}

impl Plane {
    /// Provision every node and wire it into one simulation. With no rule set,
    /// every report goes to every monitor.
    pub fn build(cfg: PlaneConfig, rules: Option<RuleSet>) -> Result<Plane, PlaneError> {
        cfg.validate()?;
        let rules = rules.unwrap_or_else(|| default_rules(&cfg));

        let mut specs = HashMap::new();
        let mut monitors = Vec::new();
        for (j, spec) in cfg.monitors.iter().enumerate() {
            let m = Monitor::new(spec.clone(), (j as u64) << 32)?;
            specs.insert(spec.id().clone(), m.required_fields());
            monitors.push(m);
        }
        for r in rules.rules() {
            for d in &r.action.destinations {
                let need = *specs.get(d).ok_or_else(|| PlaneError::UnknownMonitor { rule: r.rule_id, monitor: d.clone() })?;
                if !r.action.projection.contains(need) {
                    let fields = ReportFields::names(need.difference(r.action.projection));
                    return Err(PlaneError::MissingProjection { rule: r.rule_id, monitor: d.clone(), fields });
                }
            }
        }

        let net = &cfg.network;
        let mut spec = TopologySpec::default();
        for e in 0..net.elements {
            spec.add_switch(&format!("sw{e}"), net.switch_latency_ns);
            if e > 0 {
                spec.add_link(&format!("sw{e}"), "sw0", net.link_latency_ns);
            }
        }
        let mut hosts = vec!["ctl0".to_string()];
        hosts.extend((0..cfg.classifier.nodes).map(|i| format!("cls{i}")));
        hosts.extend((0..cfg.monitors.len()).map(|j| format!("mon{j}")));
        hosts.extend((0..cfg.raft.replicas).map(|k| format!("raft{k}")));
        for h in &hosts {
            spec.add_host(h);
            spec.add_link(h, "sw0", net.link_latency_ns);
        }
        let topo = Arc::new(Topology::build(&spec)?);
        let node = |name: &str| topo.node(name);

        let shards = shard_ruleset(&rules, cfg.classifier.nodes, cfg.classifier.shard_mode)?;
        let classifiers = shards
            .iter()
            .enumerate()
            .map(|(i, rs)| Ok((node(&format!("cls{i}"))?, ClassifierEngine::build(rs, cfg.classifier.engine))))
            .collect::<Result<Vec<_>, PlaneError>>()?;

        let raft_hosts = (0..cfg.raft.replicas).map(|k| node(&format!("raft{k}"))).collect::<Result<Vec<_>, _>>()?;
        let elements: Vec<ElementId> = (0..net.elements).map(ElementId).collect();
        let leader_guess = cfg.raft.preferred_leader.unwrap_or(0);
        let mut group = RaftGroup::new(
            raft_hosts.clone(),
            elements.clone(),
            cfg.raft.timing,
            cfg.raft.service,
            cfg.seed,
            cfg.raft.preferred_leader,
        );
        let ctl = node("ctl0")?;
        group.register_client(CONTROL_CLIENT, ctl);
        let mut switches = HashMap::new();
        let mut switch_nodes = BTreeMap::new();
        for e in &elements {
            let n = node(&e.to_string())?;
            group.register_switch(*e, n);
            switches.insert(n, *e);
            switch_nodes.insert(*e, n);
        }
        let mut monitor_nodes = HashMap::new();
        let mut mon_map = HashMap::new();
        for (j, m) in monitors.into_iter().enumerate() {
            let n = node(&format!("mon{j}"))?;
            let client = j as ClientId + 1;
            group.register_client(client, n);
            monitor_nodes.insert(m.id().clone(), n);
            mon_map.insert(n, MonitorNode { monitor: m, writer: Writer::new(client, leader_guess) });
        }
        let timers = group.initial_timers();

        let world = PlaneWorld {
            group,
            classifiers,
            monitors: mon_map,
            monitor_nodes,
            switches,
            switch_nodes,
            control: (ctl, Writer::new(CONTROL_CLIENT, leader_guess)),
            classifier_service: VirtualTime::from_nanos(cfg.classifier.service_ns),
            monitor_service: VirtualTime::from_nanos(cfg.monitor_service_ns),
            direct: cfg.direct_reflex,
            retry: VirtualTime::from_nanos(cfg.raft.retry_timeout_ns),
            elements: net.elements,
            traces: BTreeMap::new(),
            counters: RunCounters::default(),
        };
        let mut sim = Simulator::new(topo.clone(), world, cfg.seed);
        let compute = NodeConfig::default().with_capacity(cfg.queue_capacity).with_mac_serial_ns(cfg.mac_serial_ns);
        let mut compute_nodes: Vec<NodeId> = sim.world.classifiers.iter().map(|(n, _)| *n).collect();
        compute_nodes.extend(sim.world.monitors.keys().copied());
        for n in compute_nodes {
            sim.configure_node(n, compute);
        }
        let raft_node = NodeConfig::default().with_capacity(cfg.queue_capacity).with_mac_serial_ns(cfg.raft.mac_serial_ns);
        for n in raft_hosts {
            sim.configure_node(n, raft_node);
        }
        for (n, at, token) in timers {
            sim.schedule_timer(at, n, token)?;
        }
        Ok(Plane { sim, cfg })
    }

    pub fn config(&self) -> &PlaneConfig {
        &self.cfg
    }

    pub fn now(&self) -> VirtualTime {
        self.sim.now()
    }

    pub fn raft(&self) -> &RaftGroup {
        &self.sim.world.group
    }

    pub fn node_id(&self, name: &str) -> Result<NodeId, PlaneError> {
        Ok(self.sim.topology().node(name)?)
    }

    /// Wait for a leader, then for its next heartbeat round to finish, so the
    /// following tens of microseconds carry no Raft background traffic.
    pub fn quiesce(&mut self) -> Result<MemberId, PlaneError> {
        let deadline = self.now() + VirtualTime::from_millis(10);
        self.sim.run_until_pred(deadline, |w| w.group.ready_leader().is_some())?;
        let leader = self.raft().ready_leader().ok_or(crate::raftstate::RaftError::NoLeader)?;
        let beat = self.raft().node(leader).expect("live leader").next_wakeup();
        self.sim.run_until(beat + VirtualTime::from_micros(5))?;
        Ok(leader)
    }

    fn reset_run(&mut self) -> Vec<u64> {
        self.sim.stats_mut().clear();
        self.sim.world.traces.clear();
        self.sim.world.counters = RunCounters::default();
        self.sim.topology().node_ids().map(|n| self.sim.counters(n).dropped).collect()
    }

    /// Feed `reports` to the classifiers at `rate_rps`, starting now, and run
    /// until the plane has drained. Duplicate reports are coalesced first.
    pub fn inject_reports(&mut self, reports: &[IntReport], rate_rps: u64) -> Result<RunReport, PlaneError> {
        if rate_rps == 0 {
            return Err(PlaneError::NonPositive("rate_rps"));
        }
        let drops_before = self.reset_run();
        let (reports, dedup) = dedup_coalesce(reports.iter().cloned(), DEFAULT_DEDUP_WINDOW);
        let start = self.now();
        let n_cls = self.sim.world.classifiers.len();
        let mut last = start;
        for (i, r) in reports.into_iter().enumerate() {
            // exact rational spacing so long streams do not drift
            let at = start + VirtualTime::from_nanos((i as u128 * 1_000_000_000 / u128::from(rate_rps)) as u64);
            let shard = match self.cfg.classifier.shard_mode {
                ShardMode::Replicate => i % n_cls,
                ShardMode::PartitionByHash => shard_of_key(&ClassKey::from_report(&r), n_cls),
            };
            let dst = self.sim.world.classifiers[shard].0;
            let id = i as u64;
            let bytes = report_bytes(r.hops.len());
            self.sim.inject(at, dst, Msg::Report { id, report: r }, bytes)?;
            last = at;
        }
        self.sim.run_until(last + VirtualTime::from_nanos(self.cfg.drain_ns))?;

        let topo = self.sim.topology().clone();
        let drops = topo
            .node_ids()
            .map(|n| (topo.name(n).to_string(), self.sim.counters(n).dropped - drops_before[n.index()]))
            .filter(|(_, d)| *d > 0)
            .collect();
        let stats = self.sim.stats();
        let stages = [STAGE_CLASSIFY, STAGE_MONITOR, STAGE_DIRECT, STAGE_COMMIT, STAGE_E2E]
            .into_iter()
            .filter(|l| !stats.samples(l).is_empty())
            .map(|l| (l.to_string(), stats.summary(l)))
            .collect();
        let c = &self.sim.world.counters;
        let throughput_rps = match c.first_done {
            Some(first) if c.monitor_processed > 1 && c.last_done > first => {
                (c.monitor_processed - 1) as f64 * 1e9 / (c.last_done - first).as_nanos() as f64
            }
            _ => 0.0,
        };
        Ok(RunReport {
            reports_in: dedup.reports_in,
            dedup,
            classified: c.classified,
            unmatched: c.unmatched,
            monitor_processed: c.monitor_processed,
            monitor_errors: c.monitor_errors,
            commands: c.commands,
            invalid_commands: c.invalid_commands,
            switch_updates: c.switch_updates,
            drops,
            stages,
            throughput_rps,
            traces: self.sim.world.traces.values().cloned().collect(),
        })
    }

    /// Monitor-local reflex time: report entering the monitor NIC to the
    /// command leaving it.
    pub fn measure_direct_reflex_latency(&mut self, reports: &[IntReport], rate_rps: u64) -> Result<LatencyStats, PlaneError> {
        let run = self.inject_reports(reports, rate_rps)?;
        if run.traces.is_empty() {
            return Err(PlaneError::NoCommand);
        }
        Ok(run.stage(STAGE_DIRECT))
    }

    /// Report ingress at the classifier to command arrival at the target switch.
    pub fn measure_e2e_reflex(
        &mut self,
        reports: &[IntReport],
        rate_rps: u64,
    ) -> Result<(LatencyStats, Vec<ReflexTrace>), PlaneError> {
        let run = self.inject_reports(reports, rate_rps)?;
        let done: Vec<ReflexTrace> = run.traces.into_iter().filter(|t| t.switch_arrival.is_some()).collect();
        if done.is_empty() {
            return Err(PlaneError::NoCommand);
        }
        let samples: Vec<u64> = done.iter().filter_map(|t| t.e2e()).map(VirtualTime::as_nanos).collect();
        Ok((LatencyStats::from_samples(&samples, 0), done))
    }

    /// Write element state from the control-plane node through Raft.
    pub fn control_write(&mut self, cmd: ControlCommand) -> Result<CommitReceipt, PlaneError> {
        let payload = Payload::Control(cmd);
        let elements = self.cfg.network.elements;
        payload.validate(|e| e.0 < elements).map_err(PlaneError::Raft)?;
        let ctl = self.sim.world.control.0;
        let w = &mut self.sim.world.control.1;
        w.pending.push(Pending { payload, generation: 0, attempts: 0, done: None });
        let idx = w.pending.len() - 1;
        let submitted = self.now();
        self.sim.schedule_timer(submitted, ctl, KIND_CONTROL | idx as u64)?;
        let deadline = submitted + VirtualTime::from_millis(10);
        self.sim.run_until_pred(deadline, |w| w.control.1.pending[idx].done.is_some())?;
        let p = &self.sim.world.control.1.pending[idx];
        let committed_at = p.done.ok_or(crate::raftstate::RaftError::Timeout(deadline))?;
        Ok(CommitReceipt {
            request_id: idx as u64,
            submitted_at: submitted,
            committed_at,
            latency: committed_at - submitted,
            attempts: p.attempts,
        })
    }

    /// The leader's applied state for one element.
    pub fn read_element_state(&self, e: ElementId) -> Result<ElementState, PlaneError> {
        let leader = self.raft().ready_leader().ok_or(crate::raftstate::RaftError::NoLeader)?;
        let node = self.raft().node(leader).ok_or(crate::raftstate::RaftError::NoLeader)?;
        Ok(node.state_machine().element(e)?.clone())
    }

    pub fn drops(&self, name: &str) -> Result<u64, PlaneError> {
        let n = self.node_id(name)?;
        Ok(self.sim.counters(n).dropped)
    }
}
