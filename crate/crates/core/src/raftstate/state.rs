use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, HashSet, VecDeque};
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use super::{ClientId, ControlOp, LogEntry, Payload, RaftError};
use crate::monitors::CommandBody;
use crate::telemetry::{ElementId, FlowKey};

/// Request ids remembered per client for at-most-once apply.
pub const DEDUP_WINDOW: usize = 1 << 16;

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ElementState {
    pub element_id: ElementId,
    pub kv: BTreeMap<Vec<u8>, Vec<u8>>,
    pub forwarding_table: BTreeMap<FlowKey, u16>,
    pub params: BTreeMap<String, i64>,
    pub rate_limits: BTreeMap<FlowKey, u64>,
    pub rule_tables: BTreeMap<String, Vec<Vec<u8>>>,
}

impl ElementState {
    pub fn new(element_id: ElementId) -> Self {
        ElementState { element_id, ..Default::default() }
    }

    fn apply_body(&mut self, body: &CommandBody) {
        match body {
            CommandBody::Reroute { flow, new_egress_port, .. } => {
                self.forwarding_table.insert(*flow, *new_egress_port);
            }
            CommandBody::Throttle { flow, rate_bits_per_s } => {
                self.rate_limits.insert(*flow, *rate_bits_per_s);
            }
            CommandBody::SetParam { name, value } => {
                self.params.insert(name.clone(), *value);
            }
            CommandBody::UpdateRule { table, entry } => {
                self.rule_tables.entry(table.clone()).or_default().push(entry.clone());
            }
        }
    }

    fn apply_control(&mut self, op: &ControlOp) {
        match op {
            ControlOp::SetForwarding { flow, egress_port } => {
                self.forwarding_table.insert(*flow, *egress_port);
            }
            ControlOp::RemoveForwarding { flow } => {
                self.forwarding_table.remove(flow);
            }
            ControlOp::SetParam { name, value } => {
                self.params.insert(name.clone(), *value);
            }
            ControlOp::Kv { key, value } => {
                self.kv.insert(key.clone(), value.clone());
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct ClientWindow {
    order: VecDeque<u64>,
    seen: HashSet<u64>,
}

impl Hash for ClientWindow {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.order.hash(state);
    }
}

/// Replicated state: one [`ElementState`] per network element.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct StateMachine {
    elements: BTreeMap<ElementId, ElementState>,
    applied: BTreeMap<ClientId, ClientWindow>,
    last_applied: u64,
}

impl StateMachine {
    pub fn new(elements: impl IntoIterator<Item = ElementId>) -> Self {
        StateMachine {
            elements: elements.into_iter().map(|e| (e, ElementState::new(e))).collect(),
            applied: BTreeMap::new(),
            last_applied: 0,
        }
    }

    pub fn knows(&self, e: ElementId) -> bool {
        self.elements.contains_key(&e)
    }

    pub fn element(&self, e: ElementId) -> Result<&ElementState, RaftError> {
        self.elements.get(&e).ok_or(RaftError::UnknownElement(e))
    }

    pub fn elements(&self) -> impl Iterator<Item = ElementId> + '_ {
        self.elements.keys().copied()
    }

    pub fn last_applied(&self) -> u64 {
        self.last_applied
    }

    pub fn was_applied(&self, client: ClientId, request: u64) -> bool {
        self.applied.get(&client).is_some_and(|w| w.seen.contains(&request))
    }

    /// Apply one committed entry. Returns false if it was a duplicate request
    /// and left the state untouched.
    pub fn apply(&mut self, e: &LogEntry) -> bool {
        debug_assert_eq!(e.index, self.last_applied + 1, "entries apply in order");
        self.last_applied = e.index;
        if let Some((client, req)) = e.origin {
            let w = self.applied.entry(client).or_default();
            if !w.seen.insert(req) {
                return false;
            }
            w.order.push_back(req);
            if w.order.len() > DEDUP_WINDOW {
                let old = w.order.pop_front().expect("non-empty");
                w.seen.remove(&old);
            }
        }
        match &e.payload {
            Payload::NoOp => {}
            Payload::KvWrite { element, key, value } => {
                if let Some(s) = self.elements.get_mut(element) {
                    s.kv.insert(key.clone(), value.clone());
                }
            }
            Payload::Reflex(c) => {
                if let Some(s) = self.elements.get_mut(&c.target_element) {
                    s.apply_body(&c.body);
                }
            }
            Payload::Control(c) => {
                if let Some(s) = self.elements.get_mut(&c.target) {
                    s.apply_control(&c.op);
                }
            }
        }
        true
    }
}

/// Stable digest of replicated state, for cross-replica comparison.
pub fn state_digest(sm: &StateMachine) -> u64 {
    let mut h = DefaultHasher::new();
    sm.elements.hash(&mut h);
    sm.applied.hash(&mut h);
    h.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::monitors::{MonitorId, ReflexCommand};
    use crate::simnet::VirtualTime;
    use crate::telemetry::tests::flow;

    fn entry(index: u64, origin: Option<(ClientId, u64)>, payload: Payload) -> LogEntry {
        LogEntry { term: 1, index, origin, payload }
    }

    #[test]
    fn reroute_updates_forwarding() {
        let mut sm = StateMachine::new([ElementId(1)]);
        let cmd = ReflexCommand {
            command_id: 0,
            origin: MonitorId::new("m"),
            issued_at: VirtualTime::ZERO,
            target_element: ElementId(1),
            body: CommandBody::Reroute { flow: flow(1), at_switch: ElementId(1), new_egress_port: 3 },
        };
        assert!(sm.apply(&entry(1, None, Payload::Reflex(cmd))));
        assert_eq!(sm.element(ElementId(1)).unwrap().forwarding_table[&flow(1)], 3);
    }

    #[test]
    fn duplicate_request_applies_once() {
        let mut sm = StateMachine::new([ElementId(0)]);
        let p = Payload::Control(super::super::ControlCommand {
            target: ElementId(0),
            op: ControlOp::SetParam { name: "ecn".into(), value: 1 },
        });
        assert!(sm.apply(&entry(1, Some((7, 1)), p.clone())));
        let before = state_digest(&sm);
        assert!(!sm.apply(&entry(2, Some((7, 1)), p)));
        assert_eq!(state_digest(&sm), before);
        assert_eq!(sm.last_applied(), 2);
    }

    #[test]
    fn dedup_window_is_bounded() {
        let mut sm = StateMachine::new([ElementId(0)]);
        for i in 0..(DEDUP_WINDOW as u64 + 10) {
            sm.apply(&entry(i + 1, Some((1, i)), Payload::NoOp));
        }
        assert!(!sm.was_applied(1, 0));
        assert!(sm.was_applied(1, 10));
        assert_eq!(sm.applied[&1].order.len(), DEDUP_WINDOW);
    }

    #[test]
    fn unknown_element_read() {
        let sm = StateMachine::new([ElementId(0)]);
        assert_eq!(sm.element(ElementId(5)).unwrap_err(), RaftError::UnknownElement(ElementId(5)));
        assert!(sm.element(ElementId(0)).unwrap().kv.is_empty());
    }
}
