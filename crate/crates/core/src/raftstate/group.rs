use std::collections::BTreeMap;

use super::{Action, ClientId, MemberId, Payload, PersistentState, RaftConfig, RaftMessage, RaftNode, ServiceProfile};
use crate::simnet::{Ctx, NodeId, VirtualTime};
use crate::telemetry::ElementId;

/// High bits marking a timer token as belonging to a [`RaftGroup`].
pub const RAFT_TIMER_TAG: u64 = 0x5241 << 48;
const TAG_MASK: u64 = 0xffff << 48;

/// A Raft message on the simulated wire, with the sending member if any.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RaftWire {
    pub from: Option<MemberId>,
    pub msg: RaftMessage,
}

/// Applied command forwarded by the leader to the element's switch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SwitchUpdate {
    pub element: ElementId,
    pub index: u64,
    pub leader: MemberId,
    pub payload: Payload,
}

impl SwitchUpdate {
    pub fn wire_bytes(&self) -> u32 {
        16 + self.payload.wire_bytes()
    }
}

/// Raft members hosted on simulator nodes.
///
/// The group is embedded in a larger [`World`](crate::simnet::World): the
/// host forwards Raft messages, Raft timers and service-time queries here.
#[derive(Debug, Clone)]
pub struct RaftGroup {
    hosts: Vec<NodeId>,
    nodes: Vec<Option<RaftNode>>,
    persisted: Vec<Option<PersistentState>>,
    generation: Vec<u32>,
    clients: BTreeMap<ClientId, NodeId>,
    switches: BTreeMap<ElementId, NodeId>,
    elements: Vec<ElementId>,
    cfg: RaftConfig,
    profile: ServiceProfile,
    seed: u64,
    restarts: u64,
}

impl RaftGroup {
    /// One member per host node. `preferred_leader` starts its election at time zero.
    pub fn new(
        hosts: Vec<NodeId>,
        elements: Vec<ElementId>,
        cfg: RaftConfig,
        profile: ServiceProfile,
        seed: u64,
        preferred_leader: Option<MemberId>,
    ) -> Self {
        let size = hosts.len();
        let nodes = (0..size as MemberId)
            .map(|m| {
                let first = (preferred_leader == Some(m)).then_some(VirtualTime::ZERO);
                Some(RaftNode::new(m, size, cfg, &elements, seed, VirtualTime::ZERO, first))
            })
            .collect();
        RaftGroup {
            persisted: vec![None; size],
            generation: vec![0; size],
            hosts,
            nodes,
            clients: BTreeMap::new(),
            switches: BTreeMap::new(),
            elements,
            cfg,
            profile,
            seed,
            restarts: 0,
        }
    }

    pub fn size(&self) -> usize {
        self.hosts.len()
    }

    pub fn host(&self, m: MemberId) -> NodeId {
        self.hosts[m as usize]
    }

    pub fn member_at(&self, node: NodeId) -> Option<MemberId> {
        self.hosts.iter().position(|&h| h == node).map(|i| i as MemberId)
    }

    pub fn elements(&self) -> &[ElementId] {
        &self.elements
    }

    pub fn register_client(&mut self, id: ClientId, node: NodeId) {
        self.clients.insert(id, node);
    }

    /// Where the leader sends applied commands for `element`.
    pub fn register_switch(&mut self, element: ElementId, node: NodeId) {
        self.switches.insert(element, node);
    }

    /// Live member, or `None` while crashed.
    pub fn node(&self, m: MemberId) -> Option<&RaftNode> {
        self.nodes[m as usize].as_ref()
    }

    pub fn live(&self) -> impl Iterator<Item = &RaftNode> {
        self.nodes.iter().flatten()
    }

    /// The live leader with the highest term, if any.
    pub fn leader(&self) -> Option<MemberId> {
        self.live().filter(|n| n.role() == super::Role::Leader).max_by_key(|n| n.term()).map(|n| n.id())
    }

    pub fn ready_leader(&self) -> Option<MemberId> {
        self.live().filter(|n| n.is_ready_leader()).max_by_key(|n| n.term()).map(|n| n.id())
    }

    pub fn restarts(&self) -> u64 {
        self.restarts
    }

    pub fn owns_timer(token: u64) -> bool {
        token & TAG_MASK == RAFT_TIMER_TAG
    }

    fn token(&self, m: MemberId) -> u64 {
        RAFT_TIMER_TAG | (u64::from(m) << 32) | u64::from(self.generation[m as usize])
    }

    /// Invalidate any pending wakeup and return a fresh one for the host to schedule.
    fn rearm(&mut self, m: MemberId) -> Option<(NodeId, VirtualTime, u64)> {
        let node = self.nodes[m as usize].as_ref()?;
        let at = node.next_wakeup();
        self.generation[m as usize] = self.generation[m as usize].wrapping_add(1);
        Some((self.hosts[m as usize], at, self.token(m)))
    }

    /// Initial wakeups, one per member, as `(host, time, token)`.
    pub fn initial_timers(&mut self) -> Vec<(NodeId, VirtualTime, u64)> {
        (0..self.size() as MemberId).filter_map(|m| self.rearm(m)).collect()
    }

    /// Stop a member; it keeps only its persistent state.
    pub fn crash(&mut self, m: MemberId) {
        if let Some(n) = self.nodes[m as usize].take() {
            self.persisted[m as usize] = Some(n.persistent_state());
            self.generation[m as usize] = self.generation[m as usize].wrapping_add(1);
        }
    }

    /// Bring a crashed member back. Returns the wakeup the host must schedule.
    pub fn restart(&mut self, m: MemberId, now: VirtualTime) -> Option<(NodeId, VirtualTime, u64)> {
        let p = self.persisted[m as usize].take()?;
        self.restarts += 1;
        let seed = self.seed ^ self.restarts.rotate_left(17);
        self.nodes[m as usize] = Some(RaftNode::restart(m, self.size(), self.cfg, &self.elements, seed, now, p));
        self.rearm(m)
    }

    /// Core time for a message at `node`; crashed members discard instantly.
    pub fn service_time(&self, node: NodeId, wire: &RaftWire) -> VirtualTime {
        match self.member_at(node) {
            Some(m) if self.nodes[m as usize].is_some() => VirtualTime::from_nanos(self.profile.for_message(&wire.msg)),
            _ => VirtualTime::ZERO,
        }
    }

    /// Deliver a message that finished service at `node`.
    pub fn on_message<M>(&mut self, ctx: &mut Ctx<'_, M>, node: NodeId, src: Option<NodeId>, wire: RaftWire)
    where
        M: From<RaftWire> + From<SwitchUpdate>,
    {
        let Some(m) = self.member_at(node) else { return };
        if let (RaftMessage::ClientWrite { client_id, .. }, Some(src)) = (&wire.msg, src) {
            self.clients.entry(*client_id).or_insert(src);
        }
        let now = ctx.now();
        let Some(n) = self.nodes[m as usize].as_mut() else { return };
        let before = n.next_wakeup();
        let actions = n.handle(wire.from, wire.msg, now);
        let after = n.next_wakeup();
        self.execute(ctx, m, actions);
        if after < before {
            if let Some((_, at, token)) = self.rearm(m) {
                ctx.set_timer_at(at.max(now), token);
            }
        }
    }

    pub fn on_timer<M>(&mut self, ctx: &mut Ctx<'_, M>, node: NodeId, token: u64)
    where
        M: From<RaftWire> + From<SwitchUpdate>,
    {
        let Some(m) = self.member_at(node) else { return };
        if token != self.token(m) {
            return;
        }
        let now = ctx.now();
        let Some(n) = self.nodes[m as usize].as_mut() else { return };
        let actions = n.tick(now);
        self.execute(ctx, m, actions);
        if let Some((_, at, token)) = self.rearm(m) {
            ctx.set_timer_at(at.max(now), token);
        }
    }

    fn execute<M>(&mut self, ctx: &mut Ctx<'_, M>, m: MemberId, actions: Vec<Action>)
    where
        M: From<RaftWire> + From<SwitchUpdate>,
    {
        for a in actions {
            match a {
                Action::Send { to, msg } => {
                    let bytes = msg.wire_bytes();
                    ctx.send(self.hosts[to as usize], RaftWire { from: Some(m), msg }.into(), bytes);
                }
                Action::Reply { client, msg } => {
                    if let Some(&dst) = self.clients.get(&client) {
                        let bytes = msg.wire_bytes();
                        ctx.send(dst, RaftWire { from: Some(m), msg }.into(), bytes);
                    }
                }
                Action::SwitchUpdate { element, index, payload } => {
                    if let Some(&dst) = self.switches.get(&element) {
                        let u = SwitchUpdate { element, index, leader: m, payload };
                        let bytes = u.wire_bytes();
                        ctx.send(dst, u.into(), bytes);
                    }
                }
            }
        }
    }
}
