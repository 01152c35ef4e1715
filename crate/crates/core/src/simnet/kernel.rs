use std::cmp::Ordering;
use std::collections::hash_map::DefaultHasher;
use std::collections::{BinaryHeap, VecDeque};
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::rng::SimRng;
use super::stats::StatsSink;
use super::time::VirtualTime;
use super::topology::{NodeId, Topology};
use super::SimError;

/// Default bounded receive queue size per node.
pub const DEFAULT_QUEUE_CAPACITY: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ServiceTime {
    Constant { ns: u64 },
    Exponential { mean_ns: u64 },
}

impl Default for ServiceTime {
    fn default() -> Self {
        ServiceTime::Constant { ns: 0 }
    }
}

impl ServiceTime {
    pub fn constant(ns: u64) -> Self {
        ServiceTime::Constant { ns }
    }

    fn sample(self, rng: &mut SimRng) -> VirtualTime {
        match self {
            ServiceTime::Constant { ns } => VirtualTime::from_nanos(ns),
            ServiceTime::Exponential { mean_ns } => rng.exponential(VirtualTime::from_nanos(mean_ns)),
        }
    }
}

/// Per-node server model: single FIFO server, bounded queue, NIC MAC/serial delay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeConfig {
    pub service: ServiceTime,
    /// Maximum messages held by the node (waiting plus in service).
    pub queue_capacity: usize,
    /// Added once on receive and once on transmit.
    pub mac_serial_ns: u64,
}

impl Default for NodeConfig {
    fn default() -> Self {
        NodeConfig { service: ServiceTime::default(), queue_capacity: DEFAULT_QUEUE_CAPACITY, mac_serial_ns: 0 }
    }
}

impl NodeConfig {
    pub fn with_service_ns(mut self, ns: u64) -> Self {
        self.service = ServiceTime::constant(ns);
        self
    }

    pub fn with_capacity(mut self, cap: usize) -> Self {
        self.queue_capacity = cap;
        self
    }

    pub fn with_mac_serial_ns(mut self, ns: u64) -> Self {
        self.mac_serial_ns = ns;
        self
    }
}

/// A message in flight or being processed, with its timing metadata.
#[derive(Debug, Clone)]
pub struct Envelope<M> {
    /// `None` for messages injected from outside the simulated network.
    pub src: Option<NodeId>,
    pub dst: NodeId,
    pub sent_at: VirtualTime,
    /// When the message reached the destination NIC (before the receive MAC/serial delay).
    pub nic_arrival: VirtualTime,
    pub size_bytes: u32,
    pub msg: M,
}

/// Behaviour of every node in a simulation.
///
/// The world owns all node state; the kernel only owns time, queues and routing.
pub trait World {
    type Msg;

    /// Called when a message finishes service at `node`.
    fn on_message(&mut self, ctx: &mut Ctx<'_, Self::Msg>, node: NodeId, env: Envelope<Self::Msg>);

    fn on_timer(&mut self, _ctx: &mut Ctx<'_, Self::Msg>, _node: NodeId, _token: u64) {}

    /// Per-message service time override; `None` draws from the node's configured distribution.
    fn service_time(&self, _node: NodeId, _msg: &Self::Msg) -> Option<VirtualTime> {
        None
    }

    /// Delivery was refused because the node's queue was full.
    fn on_drop(&mut self, _node: NodeId, _env: &Envelope<Self::Msg>, _now: VirtualTime) {}
}

#[derive(Debug)]
enum EventKind<M> {
    Arrive(Envelope<M>),
    ServiceDone(NodeId),
    Timer { node: NodeId, token: u64 },
}

#[derive(Debug)]
struct Scheduled<M> {
    fire_at: VirtualTime,
    seq: u64,
    kind: EventKind<M>,
}

impl<M> PartialEq for Scheduled<M> {
    fn eq(&self, other: &Self) -> bool {
        (self.fire_at, self.seq) == (other.fire_at, other.seq)
    }
}
impl<M> Eq for Scheduled<M> {}
impl<M> PartialOrd for Scheduled<M> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<M> Ord for Scheduled<M> {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        (other.fire_at, other.seq).cmp(&(self.fire_at, self.seq))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TraceKind {
    Arrive,
    Drop,
    Done,
    Timer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TraceRecord {
    pub at: VirtualTime,
    pub seq: u64,
    pub node: NodeId,
    pub kind: TraceKind,
}

/// Per-node counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeCounters {
    pub accepted: u64,
    pub dropped: u64,
    pub processed: u64,
    pub max_occupancy: usize,
    pub busy_ns: u64,
}

struct NodeRuntime<M> {
    cfg: NodeConfig,
    waiting: VecDeque<Envelope<M>>,
    in_service: Option<Envelope<M>>,
    counters: NodeCounters,
}

impl<M> NodeRuntime<M> {
    fn occupancy(&self) -> usize {
        self.waiting.len() + usize::from(self.in_service.is_some())
    }
}

/// Time, event queue, node servers and routing for one simulation instance.
pub struct Kernel<M> {
    topology: Arc<Topology>,
    now: VirtualTime,
    next_seq: u64,
    queue: BinaryHeap<Scheduled<M>>,
    nodes: Vec<NodeRuntime<M>>,
    rng: SimRng,
    stats: StatsSink,
    jitter_max_ns: u64,
    trace: Option<Vec<TraceRecord>>,
    fault: Option<SimError>,
    events: u64,
    sent: u64,
    delivered: u64,
    dropped: u64,
    in_flight: u64,
}

impl<M> Kernel<M> {
    fn new(topology: Arc<Topology>, seed: u64) -> Self {
        let nodes = topology
            .node_ids()
            .map(|_| NodeRuntime {
                cfg: NodeConfig::default(),
                waiting: VecDeque::new(),
                in_service: None,
                counters: NodeCounters::default(),
            })
            .collect();
        Kernel {
            topology,
            now: VirtualTime::ZERO,
            next_seq: 0,
            queue: BinaryHeap::new(),
            nodes,
            rng: SimRng::labeled(seed, "simnet.kernel"),
            stats: StatsSink::new(),
            jitter_max_ns: 0,
            trace: None,
            fault: None,
            events: 0,
            sent: 0,
            delivered: 0,
            dropped: 0,
            in_flight: 0,
        }
    }

    fn push(&mut self, fire_at: VirtualTime, kind: EventKind<M>) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Scheduled { fire_at, seq, kind });
    }

    fn fail(&mut self, err: SimError) {
        if self.fault.is_none() {
            self.fault = Some(err);
        }
    }

    fn mac_serial(&self, node: NodeId) -> VirtualTime {
        VirtualTime::from_nanos(self.nodes[node.index()].cfg.mac_serial_ns)
    }

    fn jitter(&mut self) -> VirtualTime {
        if self.jitter_max_ns == 0 {
            VirtualTime::ZERO
        } else {
            self.rng.uniform_time(VirtualTime::ZERO, VirtualTime::from_nanos(self.jitter_max_ns))
        }
    }

    /// Schedule delivery of `msg` from `src` to `dst` departing the source core at `at`.
    ///
    /// Delivery to the destination core happens at
    /// `at + mac(src) + route(size) + jitter + mac(dst)`.
    fn send_at(&mut self, at: VirtualTime, src: NodeId, dst: NodeId, msg: M, size_bytes: u32) -> Result<VirtualTime, SimError> {
        let route_delay = self.topology.path_latency(src, dst, size_bytes)?;
        let egress = at + self.mac_serial(src);
        let nic_arrival = egress + route_delay + self.jitter();
        let env = Envelope { src: Some(src), dst, sent_at: at, nic_arrival, size_bytes, msg };
        Ok(self.schedule_arrival(env))
    }

    fn schedule_arrival(&mut self, env: Envelope<M>) -> VirtualTime {
        let at = env.nic_arrival + self.mac_serial(env.dst);
        self.sent += 1;
        self.in_flight += 1;
        self.push(at, EventKind::Arrive(env));
        at
    }

    fn record(&mut self, node: NodeId, kind: TraceKind, seq: u64) {
        if let Some(trace) = self.trace.as_mut() {
            trace.push(TraceRecord { at: self.now, seq, node, kind });
        }
    }
}

/// Handle passed to node behaviour while an event is processed.
pub struct Ctx<'a, M> {
    kernel: &'a mut Kernel<M>,
    node: NodeId,
}

impl<M> Ctx<'_, M> {
    pub fn now(&self) -> VirtualTime {
        self.kernel.now
    }

    pub fn node(&self) -> NodeId {
        self.node
    }

    pub fn topology(&self) -> &Topology {
        &self.kernel.topology
    }

    /// Send from the current node; returns the scheduled core-delivery time.
    pub fn send(&mut self, dst: NodeId, msg: M, size_bytes: u32) -> Option<VirtualTime> {
        let now = self.kernel.now;
        match self.kernel.send_at(now, self.node, dst, msg, size_bytes) {
            Ok(t) => Some(t),
            Err(e) => {
                self.kernel.fail(e);
                None
            }
        }
    }

    /// Time the next message sent now would leave this node's NIC.
    pub fn egress_time(&self) -> VirtualTime {
        self.kernel.now + self.kernel.mac_serial(self.node)
    }

    pub fn set_timer(&mut self, delay: VirtualTime, token: u64) {
        let at = self.kernel.now + delay;
        self.kernel.push(at, EventKind::Timer { node: self.node, token });
    }

    /// Absolute-time timer; scheduling in the past is a logic error and aborts the run.
    pub fn set_timer_at(&mut self, at: VirtualTime, token: u64) {
        if at < self.kernel.now {
            self.kernel.fail(SimError::EventInPast { now: self.kernel.now, at });
            return;
        }
        self.kernel.push(at, EventKind::Timer { node: self.node, token });
    }

    pub fn stats(&mut self) -> &mut StatsSink {
        &mut self.kernel.stats
    }

    pub fn rng(&mut self) -> &mut SimRng {
        &mut self.kernel.rng
    }

    /// Abort the run with an error after the current event.
    pub fn fail(&mut self, err: SimError) {
        self.kernel.fail(err);
    }
}

/// Result of [`Simulator::run_until`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub events: u64,
    pub final_time: VirtualTime,
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub in_flight: u64,
    pub per_node: Vec<NodeCounters>,
    pub stats: StatsSink,
}

impl SimSummary {
    pub fn drops(&self, node: NodeId) -> u64 {
        self.per_node[node.index()].dropped
    }
}

/// A discrete-event simulation: kernel plus the world it drives.
pub struct Simulator<W: World> {
    kernel: Kernel<W::Msg>,
    pub world: W,
}

impl<W: World> Simulator<W> {
    pub fn new(topology: Arc<Topology>, world: W, seed: u64) -> Self {
        Simulator { kernel: Kernel::new(topology, seed), world }
    }

    pub fn topology(&self) -> &Arc<Topology> {
        &self.kernel.topology
    }

    pub fn configure_node(&mut self, node: NodeId, cfg: NodeConfig) {
        assert!(cfg.queue_capacity >= 1, "queue capacity must be at least 1");
        self.kernel.nodes[node.index()].cfg = cfg;
    }

    pub fn node_config(&self, node: NodeId) -> NodeConfig {
        self.kernel.nodes[node.index()].cfg
    }

    /// Uniform extra delay in `[0, max_ns]` added to every message (reorders deliveries).
    pub fn set_jitter(&mut self, max_ns: u64) {
        self.kernel.jitter_max_ns = max_ns;
    }

    pub fn enable_trace(&mut self) {
        self.kernel.trace.get_or_insert_with(Vec::new);
    }

    pub fn trace(&self) -> &[TraceRecord] {
        self.kernel.trace.as_deref().unwrap_or(&[])
    }

    pub fn trace_digest(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.trace().hash(&mut h);
        h.finish()
    }

    pub fn now(&self) -> VirtualTime {
        self.kernel.now
    }

    pub fn stats(&self) -> &StatsSink {
        &self.kernel.stats
    }

    pub fn stats_mut(&mut self) -> &mut StatsSink {
        &mut self.kernel.stats
    }

    pub fn counters(&self, node: NodeId) -> NodeCounters {
        self.kernel.nodes[node.index()].counters
    }

    pub fn occupancy(&self, node: NodeId) -> usize {
        self.kernel.nodes[node.index()].occupancy()
    }

    pub fn pending_events(&self) -> usize {
        self.kernel.queue.len()
    }

    /// Deliver an externally generated message to `dst`'s NIC at time `at`.
    pub fn inject(&mut self, at: VirtualTime, dst: NodeId, msg: W::Msg, size_bytes: u32) -> Result<VirtualTime, SimError> {
        if at < self.kernel.now {
            return Err(SimError::EventInPast { now: self.kernel.now, at });
        }
        let env = Envelope { src: None, dst, sent_at: at, nic_arrival: at, size_bytes, msg };
        Ok(self.kernel.schedule_arrival(env))
    }

    /// Send a message as if `src` emitted it at time `at`.
    pub fn send(&mut self, at: VirtualTime, src: NodeId, dst: NodeId, msg: W::Msg, size_bytes: u32) -> Result<VirtualTime, SimError> {
        if at < self.kernel.now {
            return Err(SimError::EventInPast { now: self.kernel.now, at });
        }
        self.kernel.send_at(at, src, dst, msg, size_bytes)
    }

    pub fn schedule_timer(&mut self, at: VirtualTime, node: NodeId, token: u64) -> Result<(), SimError> {
        if at < self.kernel.now {
            return Err(SimError::EventInPast { now: self.kernel.now, at });
        }
        self.kernel.push(at, EventKind::Timer { node, token });
        Ok(())
    }

    /// Run a closure with a node context outside of event processing (e.g. to bootstrap timers).
    pub fn with_ctx<R>(&mut self, node: NodeId, f: impl FnOnce(&mut W, &mut Ctx<'_, W::Msg>) -> R) -> Result<R, SimError> {
        let mut ctx = Ctx { kernel: &mut self.kernel, node };
        let r = f(&mut self.world, &mut ctx);
        match self.kernel.fault.take() {
            Some(e) => Err(e),
            None => Ok(r),
        }
    }

    /// Process one event if its time is at or before `t_end`.
    pub fn step(&mut self, t_end: VirtualTime) -> Result<bool, SimError> {
        match self.kernel.queue.peek() {
            Some(ev) if ev.fire_at <= t_end => {}
            _ => return Ok(false),
        }
        let ev = self.kernel.queue.pop().unwrap();
        debug_assert!(ev.fire_at >= self.kernel.now);
        self.kernel.now = ev.fire_at;
        self.kernel.events += 1;
        match ev.kind {
            EventKind::Arrive(env) => self.arrive(env, ev.seq),
            EventKind::ServiceDone(node) => self.complete(node, ev.seq),
            EventKind::Timer { node, token } => {
                self.kernel.record(node, TraceKind::Timer, ev.seq);
                let mut ctx = Ctx { kernel: &mut self.kernel, node };
                self.world.on_timer(&mut ctx, node, token);
            }
        }
        match self.kernel.fault.take() {
            Some(e) => Err(e),
            None => Ok(true),
        }
    }

    fn arrive(&mut self, env: Envelope<W::Msg>, seq: u64) {
        let node = env.dst;
        self.kernel.in_flight -= 1;
        let full = {
            let rt = &self.kernel.nodes[node.index()];
            rt.occupancy() >= rt.cfg.queue_capacity
        };
        if full {
            self.kernel.nodes[node.index()].counters.dropped += 1;
            self.kernel.dropped += 1;
            self.kernel.record(node, TraceKind::Drop, seq);
            let now = self.kernel.now;
            self.world.on_drop(node, &env, now);
            return;
        }
        self.kernel.delivered += 1;
        self.kernel.nodes[node.index()].counters.accepted += 1;
        if self.kernel.nodes[node.index()].in_service.is_none() {
            self.start_service(node, env);
        } else {
            self.kernel.nodes[node.index()].waiting.push_back(env);
        }
        let rt = &mut self.kernel.nodes[node.index()];
        rt.counters.max_occupancy = rt.counters.max_occupancy.max(rt.occupancy());
        self.kernel.record(node, TraceKind::Arrive, seq);
    }

    fn start_service(&mut self, node: NodeId, env: Envelope<W::Msg>) {
        let service = match self.world.service_time(node, &env.msg) {
            Some(t) => t,
            None => {
                let dist = self.kernel.nodes[node.index()].cfg.service;
                dist.sample(&mut self.kernel.rng)
            }
        };
        let done = self.kernel.now + service;
        let rt = &mut self.kernel.nodes[node.index()];
        rt.counters.busy_ns += service.as_nanos();
        rt.in_service = Some(env);
        self.kernel.push(done, EventKind::ServiceDone(node));
    }

    fn complete(&mut self, node: NodeId, seq: u64) {
        let rt = &mut self.kernel.nodes[node.index()];
        let env = rt.in_service.take().expect("service completion without a message in service");
        rt.counters.processed += 1;
        self.kernel.record(node, TraceKind::Done, seq);
        {
            let mut ctx = Ctx { kernel: &mut self.kernel, node };
            self.world.on_message(&mut ctx, node, env);
        }
        if let Some(next) = self.kernel.nodes[node.index()].waiting.pop_front() {
            self.start_service(node, next);
        }
    }

    /// Process all events with `fire_at <= t_end` in `(fire_at, seq)` order.
    pub fn run_until(&mut self, t_end: VirtualTime) -> Result<SimSummary, SimError> {
        while self.step(t_end)? {}
        Ok(self.summary())
    }

    /// Run until `pred` holds (checked after every event) or `t_end` passes.
    pub fn run_until_pred(&mut self, t_end: VirtualTime, mut pred: impl FnMut(&W) -> bool) -> Result<bool, SimError> {
        loop {
            if pred(&self.world) {
                return Ok(true);
            }
            if !self.step(t_end)? {
                return Ok(pred(&self.world));
            }
        }
    }

    pub fn summary(&self) -> SimSummary {
        let k = &self.kernel;
        SimSummary {
            events: k.events,
            final_time: k.now,
            sent: k.sent,
            delivered: k.delivered,
            dropped: k.dropped,
            in_flight: k.in_flight,
            per_node: k.nodes.iter().map(|n| n.counters).collect(),
            stats: k.stats.clone(),
        }
    }
}
