use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::{ClientId, LogEntry, MemberId, Payload, RaftConfig, RaftMessage, Role, StateMachine};
use crate::simnet::{SimRng, VirtualTime};
use crate::telemetry::ElementId;

/// Entries carried by one AppendEntries at most.
const MAX_BATCH: usize = 64;

/// Side effects a node asks its host to carry out.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Send { to: MemberId, msg: RaftMessage },
    Reply { client: ClientId, msg: RaftMessage },
    /// Leader only: forward an applied command to the element's switch.
    SwitchUpdate { element: ElementId, index: u64, payload: Payload },
}

/// What survives a crash.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersistentState {
    pub current_term: u64,
    pub voted_for: Option<MemberId>,
    pub log: Vec<LogEntry>,
}

#[derive(Debug, Clone)]
pub struct RaftNode {
    id: MemberId,
    size: usize,
    cfg: RaftConfig,
    current_term: u64,
    voted_for: Option<MemberId>,
    log: Vec<LogEntry>,
    commit_index: u64,
    role: Role,
    leader_id: Option<MemberId>,
    next_index: Vec<u64>,
    match_index: Vec<u64>,
    last_sent: Vec<VirtualTime>,
    votes: BTreeSet<MemberId>,
    election_deadline: VirtualTime,
    rng: SimRng,
    sm: StateMachine,
    /// Leader: committed-entry replies owed to clients, by log index.
    waiting: BTreeMap<u64, (ClientId, u64)>,
    inflight: HashMap<(ClientId, u64), u64>,
}

impl RaftNode {
    /// A fresh follower. `first_deadline` overrides the first election
    /// timeout, e.g. to make one member start an election immediately.
    pub fn new(
        id: MemberId,
        size: usize,
        cfg: RaftConfig,
        elements: &[ElementId],
        seed: u64,
        now: VirtualTime,
        first_deadline: Option<VirtualTime>,
    ) -> Self {
        let mut n = RaftNode {
            id,
            size,
            cfg,
            current_term: 0,
            voted_for: None,
            log: Vec::new(),
            commit_index: 0,
            role: Role::Follower,
            leader_id: None,
            next_index: vec![1; size],
            match_index: vec![0; size],
            last_sent: vec![VirtualTime::ZERO; size],
            votes: BTreeSet::new(),
            election_deadline: now,
            rng: SimRng::labeled(seed, &format!("raft.{id}")),
            sm: StateMachine::new(elements.iter().copied()),
            waiting: BTreeMap::new(),
            inflight: HashMap::new(),
        };
        n.election_deadline = first_deadline.unwrap_or_else(|| n.random_deadline(now));
        n
    }

    /// Rejoin after a crash with only persisted state; the state machine is
    /// rebuilt as entries are committed again.
    pub fn restart(
        id: MemberId,
        size: usize,
        cfg: RaftConfig,
        elements: &[ElementId],
        seed: u64,
        now: VirtualTime,
        p: PersistentState,
    ) -> Self {
        let mut n = RaftNode::new(id, size, cfg, elements, seed, now, None);
        n.current_term = p.current_term;
        n.voted_for = p.voted_for;
        n.log = p.log;
        n
    }

    pub fn persistent_state(&self) -> PersistentState {
        PersistentState { current_term: self.current_term, voted_for: self.voted_for, log: self.log.clone() }
    }

    pub fn id(&self) -> MemberId {
        self.id
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn term(&self) -> u64 {
        self.current_term
    }

    pub fn leader_hint(&self) -> Option<MemberId> {
        self.leader_id
    }

    pub fn commit_index(&self) -> u64 {
        self.commit_index
    }

    pub fn last_applied(&self) -> u64 {
        self.sm.last_applied()
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    pub fn state_machine(&self) -> &StateMachine {
        &self.sm
    }

    /// Leader that has committed an entry from its own term, so its commit
    /// index and state machine are current.
    pub fn is_ready_leader(&self) -> bool {
        self.role == Role::Leader && self.commit_index > 0 && self.term_at(self.commit_index) == self.current_term
    }

    pub fn last_index(&self) -> u64 {
        self.log.len() as u64
    }

    fn last_term(&self) -> u64 {
        self.log.last().map_or(0, |e| e.term)
    }

    fn term_at(&self, index: u64) -> u64 {
        if index == 0 {
            0
        } else {
            self.log[index as usize - 1].term
        }
    }

    fn majority(&self) -> usize {
        self.size / 2 + 1
    }

    fn peers(&self) -> impl Iterator<Item = MemberId> + '_ {
        (0..self.size as MemberId).filter(move |&p| p != self.id)
    }

    fn random_deadline(&mut self, now: VirtualTime) -> VirtualTime {
        now + self.rng.uniform_time(
            VirtualTime::from_nanos(self.cfg.election_timeout_min_ns),
            VirtualTime::from_nanos(self.cfg.election_timeout_max_ns),
        )
    }

    /// Next time [`tick`](Self::tick) has work to do.
    pub fn next_wakeup(&self) -> VirtualTime {
        match self.role {
            Role::Leader => {
                let hb = VirtualTime::from_nanos(self.cfg.heartbeat_ns);
                self.peers().map(|p| self.last_sent[p as usize] + hb).min().unwrap_or(VirtualTime::MAX)
            }
            _ => self.election_deadline,
        }
    }

    pub fn tick(&mut self, now: VirtualTime) -> Vec<Action> {
        let mut out = Vec::new();
        match self.role {
            Role::Leader => {
                let hb = VirtualTime::from_nanos(self.cfg.heartbeat_ns);
                let due: Vec<MemberId> = self.peers().filter(|&p| now >= self.last_sent[p as usize] + hb).collect();
                for p in due {
                    // resend anything not yet acknowledged, in case it was lost
                    let from = self.match_index[p as usize] + 1;
                    self.send_append(p, from, now, &mut out);
                }
            }
            _ if now >= self.election_deadline => self.start_election(now, &mut out),
            _ => {}
        }
        out
    }

    fn start_election(&mut self, now: VirtualTime, out: &mut Vec<Action>) {
        self.current_term += 1;
        self.role = Role::Candidate;
        self.voted_for = Some(self.id);
        self.leader_id = None;
        self.votes = BTreeSet::from([self.id]);
        self.election_deadline = self.random_deadline(now);
        if self.votes.len() >= self.majority() {
            self.become_leader(now, out);
            return;
        }
        let (last_log_index, last_log_term) = (self.last_index(), self.last_term());
        for p in self.peers().collect::<Vec<_>>() {
            let msg = RaftMessage::RequestVote { term: self.current_term, candidate: self.id, last_log_index, last_log_term };
            out.push(Action::Send { to: p, msg });
        }
    }

    fn become_leader(&mut self, now: VirtualTime, out: &mut Vec<Action>) {
        self.role = Role::Leader;
        self.leader_id = Some(self.id);
        let next = self.last_index() + 1;
        self.next_index = vec![next; self.size];
        self.match_index = vec![0; self.size];
        self.waiting.clear();
        self.inflight.clear();
        self.append(None, Payload::NoOp);
        self.replicate(now, out);
        self.advance_commit(out);
    }

    fn step_down(&mut self, term: u64, now: VirtualTime) {
        let was = self.role;
        if term > self.current_term {
            self.current_term = term;
            self.voted_for = None;
        }
        self.role = Role::Follower;
        self.votes.clear();
        if was != Role::Follower {
            self.waiting.clear();
            self.inflight.clear();
            self.election_deadline = self.random_deadline(now);
        }
    }

    fn append(&mut self, origin: Option<(ClientId, u64)>, payload: Payload) -> u64 {
        let index = self.last_index() + 1;
        self.log.push(LogEntry { term: self.current_term, index, origin, payload });
        index
    }

    fn send_append(&mut self, p: MemberId, from: u64, now: VirtualTime, out: &mut Vec<Action>) {
        let from = from.max(1);
        let prev_index = from - 1;
        let end = (self.log.len()).min(prev_index as usize + MAX_BATCH);
        let entries = self.log[prev_index as usize..end].to_vec();
        self.next_index[p as usize] = prev_index + entries.len() as u64 + 1;
        self.last_sent[p as usize] = now;
        out.push(Action::Send {
            to: p,
            msg: RaftMessage::AppendEntries {
                term: self.current_term,
                leader: self.id,
                prev_index,
                prev_term: self.term_at(prev_index),
                entries,
                leader_commit: self.commit_index,
            },
        });
    }

    /// Optimistically ship everything past each peer's next index.
    fn replicate(&mut self, now: VirtualTime, out: &mut Vec<Action>) {
        for p in self.peers().collect::<Vec<_>>() {
            let from = self.next_index[p as usize];
            if from <= self.last_index() {
                self.send_append(p, from, now, out);
            }
        }
    }

    fn advance_commit(&mut self, out: &mut Vec<Action>) {
        let last = self.last_index();
        let mut n = last;
        while n > self.commit_index {
            if self.term_at(n) == self.current_term {
                let acks = 1 + self.peers().filter(|&p| self.match_index[p as usize] >= n).count();
                if acks >= self.majority() {
                    self.commit_index = n;
                    break;
                }
            } else {
                break;
            }
            n -= 1;
        }
        self.apply_committed(out);
    }

    /// Apply `(last_applied, commit_index]` in order. On the leader each
    /// applied command is forwarded to its switch and then acknowledged.
    pub fn apply_committed(&mut self, out: &mut Vec<Action>) -> Vec<u64> {
        let mut applied = Vec::new();
        while self.sm.last_applied() < self.commit_index {
            let idx = self.sm.last_applied() + 1;
            let entry = &self.log[idx as usize - 1];
            let fresh = self.sm.apply(entry);
            applied.push(idx);
            if self.role != Role::Leader {
                continue;
            }
            if fresh {
                if let Some(element) = entry.payload.switch_target() {
                    out.push(Action::SwitchUpdate { element, index: idx, payload: entry.payload.clone() });
                }
            }
            if let Some((client, req)) = self.waiting.remove(&idx) {
                self.inflight.remove(&(client, req));
                let msg = RaftMessage::ClientReply { request_id: req, committed: true, leader_hint: Some(self.id) };
                out.push(Action::Reply { client, msg });
            }
        }
        applied
    }

    pub fn handle(&mut self, from: Option<MemberId>, msg: RaftMessage, now: VirtualTime) -> Vec<Action> {
        let mut out = Vec::new();
        if let Some(t) = msg.term() {
            if t > self.current_term {
                self.step_down(t, now);
                self.leader_id = None;
            }
        }
        match msg {
            RaftMessage::RequestVote { term, candidate, last_log_index, last_log_term } => {
                let up_to_date = (last_log_term, last_log_index) >= (self.last_term(), self.last_index());
                let granted = term == self.current_term
                    && self.voted_for.is_none_or(|v| v == candidate)
                    && up_to_date;
                if granted {
                    self.voted_for = Some(candidate);
                    self.election_deadline = self.random_deadline(now);
                }
                out.push(Action::Send { to: candidate, msg: RaftMessage::VoteReply { term: self.current_term, granted } });
            }
            RaftMessage::VoteReply { term, granted } => {
                if self.role == Role::Candidate && term == self.current_term && granted {
                    if let Some(f) = from {
                        self.votes.insert(f);
                    }
                    if self.votes.len() >= self.majority() {
                        self.become_leader(now, &mut out);
                    }
                }
            }
            RaftMessage::AppendEntries { term, leader, prev_index, prev_term, entries, leader_commit } => {
                self.on_append(term, leader, prev_index, prev_term, entries, leader_commit, now, &mut out);
            }
            RaftMessage::AppendReply { term, success, match_index } => {
                let Some(p) = from else { return out };
                if self.role != Role::Leader || term != self.current_term {
                    return out;
                }
                let pi = p as usize;
                if success {
                    if match_index > self.match_index[pi] {
                        self.match_index[pi] = match_index;
                    }
                    self.next_index[pi] = self.next_index[pi].max(self.match_index[pi] + 1);
                    self.advance_commit(&mut out);
                } else {
                    let from = (match_index + 1).max(self.match_index[pi] + 1);
                    self.send_append(p, from, now, &mut out);
                }
            }
            RaftMessage::ClientWrite { client_id, request_id, payload } => {
                self.on_client_write(client_id, request_id, payload, now, &mut out);
            }
            RaftMessage::ClientReply { .. } => {}
        }
        out
    }

    #[allow(clippy::too_many_arguments)]
    fn on_append(
        &mut self,
        term: u64,
        leader: MemberId,
        prev_index: u64,
        prev_term: u64,
        entries: Vec<LogEntry>,
        leader_commit: u64,
        now: VirtualTime,
        out: &mut Vec<Action>,
    ) {
        let reply = |term, success, match_index| Action::Send {
            to: leader,
            msg: RaftMessage::AppendReply { term, success, match_index },
        };
        if term < self.current_term {
            out.push(reply(self.current_term, false, 0));
            return;
        }
        if self.role != Role::Follower {
            self.step_down(term, now);
        }
        self.leader_id = Some(leader);
        self.election_deadline = self.random_deadline(now);

        if prev_index > self.last_index() {
            out.push(reply(self.current_term, false, self.last_index()));
            return;
        }
        if self.term_at(prev_index) != prev_term {
            // skip back over the whole conflicting term
            let bad = self.term_at(prev_index);
            let mut i = prev_index;
            while i > self.commit_index && self.term_at(i) == bad {
                i -= 1;
            }
            out.push(reply(self.current_term, false, i.min(prev_index - 1)));
            return;
        }
        let mut idx = prev_index;
        for e in entries {
            idx += 1;
            if idx <= self.last_index() {
                if self.term_at(idx) == e.term {
                    continue;
                }
                debug_assert!(idx > self.commit_index, "truncating committed entry {idx}");
                self.log.truncate(idx as usize - 1);
            }
            self.log.push(e);
        }
        if leader_commit > self.commit_index {
            self.commit_index = leader_commit.min(idx);
        }
        self.apply_committed(out);
        out.push(reply(self.current_term, true, idx));
    }

    fn on_client_write(&mut self, client: ClientId, req: u64, payload: Payload, now: VirtualTime, out: &mut Vec<Action>) {
        let reject = |hint| Action::Reply {
            client,
            msg: RaftMessage::ClientReply { request_id: req, committed: false, leader_hint: hint },
        };
        if self.role != Role::Leader {
            out.push(reject(self.leader_id));
            return;
        }
        if payload.validate(|e| self.sm.knows(e)).is_err() {
            out.push(reject(None));
            return;
        }
        if self.sm.was_applied(client, req) {
            let msg = RaftMessage::ClientReply { request_id: req, committed: true, leader_hint: Some(self.id) };
            out.push(Action::Reply { client, msg });
            return;
        }
        if self.inflight.contains_key(&(client, req)) {
            return;
        }
        let idx = self.append(Some((client, req)), payload);
        self.waiting.insert(idx, (client, req));
        self.inflight.insert((client, req), idx);
        self.replicate(now, out);
        self.advance_commit(out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const T0: VirtualTime = VirtualTime::ZERO;

    fn node(id: MemberId, size: usize) -> RaftNode {
        RaftNode::new(id, size, RaftConfig::default(), &[ElementId(0)], 1, T0, None)
    }

    fn kv(b: u8) -> Payload {
        Payload::kv(ElementId(0), [b; 16], [b; 64])
    }

    /// Deliver every Send between the given nodes until quiet.
    fn pump(nodes: &mut [RaftNode], mut pending: Vec<(MemberId, Action)>) -> Vec<Action> {
        let mut external = Vec::new();
        while !pending.is_empty() {
            let mut next = Vec::new();
            for (from, a) in pending {
                match a {
                    Action::Send { to, msg } => {
                        for b in nodes[to as usize].handle(Some(from), msg, T0) {
                            next.push((to, b));
                        }
                    }
                    other => external.push(other),
                }
            }
            pending = next;
        }
        external
    }

    fn elect(nodes: &mut [RaftNode], who: MemberId) -> Vec<Action> {
        let deadline = nodes[who as usize].next_wakeup();
        let acts = nodes[who as usize].tick(deadline);
        pump(nodes, acts.into_iter().map(|a| (who, a)).collect())
    }

    #[test]
    fn single_node_elects_itself() {
        let mut n = node(0, 1);
        let acts = n.tick(n.next_wakeup());
        assert_eq!(n.role(), Role::Leader);
        assert!(acts.is_empty());
        assert_eq!(n.commit_index(), 1, "leader no-op commits alone");
    }

    #[test]
    fn three_nodes_elect_and_replicate() {
        let mut nodes: Vec<RaftNode> = (0..3).map(|i| node(i, 3)).collect();
        elect(&mut nodes, 1);
        assert_eq!(nodes[1].role(), Role::Leader);
        assert!(nodes.iter().all(|n| n.term() == 1));
        let acts = nodes[1].handle(None, RaftMessage::ClientWrite { client_id: 9, request_id: 1, payload: kv(1) }, T0);
        let ext = pump(&mut nodes, acts.into_iter().map(|a| (1, a)).collect());
        assert!(ext.iter().any(|a| matches!(a, Action::Reply { client: 9, msg: RaftMessage::ClientReply { committed: true, .. } })));
        assert_eq!(nodes[1].commit_index(), 2);
        // followers learn the commit on the next append
        let wake = nodes[1].next_wakeup();
        let hb = nodes[1].tick(wake);
        pump(&mut nodes, hb.into_iter().map(|a| (1, a)).collect());
        for n in &nodes {
            assert_eq!(n.state_machine().element(ElementId(0)).unwrap().kv[&vec![1u8; 16]], vec![1u8; 64]);
        }
    }

    #[test]
    fn follower_redirects_clients() {
        let mut nodes: Vec<RaftNode> = (0..3).map(|i| node(i, 3)).collect();
        elect(&mut nodes, 0);
        let acts = nodes[2].handle(None, RaftMessage::ClientWrite { client_id: 1, request_id: 5, payload: kv(2) }, T0);
        assert_eq!(
            acts,
            vec![Action::Reply { client: 1, msg: RaftMessage::ClientReply { request_id: 5, committed: false, leader_hint: Some(0) } }]
        );
    }

    #[test]
    fn prev_mismatch_rejected_without_change() {
        let mut f = node(1, 3);
        let msg = RaftMessage::AppendEntries {
            term: 1,
            leader: 0,
            prev_index: 3,
            prev_term: 1,
            entries: vec![LogEntry { term: 1, index: 4, origin: None, payload: Payload::NoOp }],
            leader_commit: 0,
        };
        let acts = f.handle(Some(0), msg, T0);
        assert!(f.log().is_empty());
        assert!(matches!(acts[0], Action::Send { msg: RaftMessage::AppendReply { success: false, .. }, .. }));
    }

    #[test]
    fn majority_of_two_commits() {
        let mut nodes: Vec<RaftNode> = (0..3).map(|i| node(i, 3)).collect();
        elect(&mut nodes, 0);
        let acts = nodes[0].handle(None, RaftMessage::ClientWrite { client_id: 1, request_id: 1, payload: kv(3) }, T0);
        // deliver only to member 1
        let mut commits = Vec::new();
        for a in acts {
            if let Action::Send { to: 1, msg } = a {
                for r in nodes[1].handle(Some(0), msg, T0) {
                    if let Action::Send { to: 0, msg } = r {
                        commits.extend(nodes[0].handle(Some(1), msg, T0));
                    }
                }
            }
        }
        assert_eq!(nodes[0].commit_index(), 2);
        assert!(nodes[2].log().len() == 1, "member 2 only has the no-op");
    }

    #[test]
    fn stale_term_rejected() {
        let mut f = node(1, 3);
        f.handle(Some(0), RaftMessage::RequestVote { term: 5, candidate: 0, last_log_index: 0, last_log_term: 0 }, T0);
        let acts = f.handle(
            Some(2),
            RaftMessage::AppendEntries { term: 3, leader: 2, prev_index: 0, prev_term: 0, entries: vec![], leader_commit: 0 },
            T0,
        );
        assert!(matches!(acts[0], Action::Send { msg: RaftMessage::AppendReply { term: 5, success: false, .. }, .. }));
    }

    #[test]
    fn duplicate_write_applies_once() {
        let mut nodes: Vec<RaftNode> = (0..3).map(|i| node(i, 3)).collect();
        elect(&mut nodes, 0);
        for _ in 0..2 {
            let acts = nodes[0].handle(None, RaftMessage::ClientWrite { client_id: 4, request_id: 8, payload: kv(4) }, T0);
            let ext = pump(&mut nodes, acts.into_iter().map(|a| (0, a)).collect());
            assert!(ext.iter().any(|a| matches!(a, Action::Reply { msg: RaftMessage::ClientReply { committed: true, .. }, .. })));
        }
        assert_eq!(nodes[0].log().len(), 2, "no-op plus one write");
    }

    #[test]
    fn restart_keeps_persistent_state() {
        let mut nodes: Vec<RaftNode> = (0..3).map(|i| node(i, 3)).collect();
        elect(&mut nodes, 0);
        let p = nodes[1].persistent_state();
        let r = RaftNode::restart(1, 3, RaftConfig::default(), &[ElementId(0)], 2, T0, p.clone());
        assert_eq!(r.term(), p.current_term);
        assert_eq!(r.log(), &p.log[..]);
        assert_eq!(r.last_applied(), 0);
    }
}
