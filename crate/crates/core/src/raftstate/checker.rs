use std::collections::BTreeMap;

use super::{state_digest, LogEntry, MemberId, RaftGroup, RaftNode, Role};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SafetyViolation {
    #[error("term {term} has two leaders: {first} and {second}")]
    ElectionSafety { term: u64, first: MemberId, second: MemberId },
    #[error("members {a} and {b} agree on entry {index} but differ before it")]
    LogMatching { a: MemberId, b: MemberId, index: u64 },
    #[error("leader {leader} of term {term} lacks committed entry {index}")]
    LeaderCompleteness { leader: MemberId, term: u64, index: u64 },
    #[error("member {member} committed a different entry at index {index}")]
    CommittedDivergence { member: MemberId, index: u64 },
    #[error("member {member} has a different state after applying {index} entries")]
    StateMachineSafety { member: MemberId, index: u64 },
}

/// Watches a [`RaftGroup`] between events and checks the Raft safety properties.
#[derive(Debug, Clone, Default)]
pub struct SafetyChecker {
    leaders: BTreeMap<u64, MemberId>,
    committed: Vec<LogEntry>,
    digests: BTreeMap<u64, u64>,
    observations: u64,
    violations: Vec<SafetyViolation>,
}

impl SafetyChecker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn violations(&self) -> &[SafetyViolation] {
        &self.violations
    }

    pub fn is_safe(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn committed_len(&self) -> usize {
        self.committed.len()
    }

    pub fn leaders_seen(&self) -> usize {
        self.leaders.len()
    }

    fn flag(&mut self, v: SafetyViolation) {
        if !self.violations.contains(&v) {
            self.violations.push(v);
        }
    }

    pub fn observe(&mut self, group: &RaftGroup) {
        self.observations += 1;
        for n in group.live() {
            self.observe_node(n);
        }
        // the pairwise check is quadratic in log length, so sample it
        if self.observations % 64 == 0 {
            self.check_log_matching(group);
        }
    }

    fn observe_node(&mut self, n: &RaftNode) {
        if n.role() == Role::Leader {
            match self.leaders.get(&n.term()) {
                Some(&first) if first != n.id() => {
                    self.flag(SafetyViolation::ElectionSafety { term: n.term(), first, second: n.id() })
                }
                Some(_) => {}
                None => {
                    self.leaders.insert(n.term(), n.id());
                    // a new leader must already hold everything committed so far
                    let log = n.log();
                    let missing = self.committed.iter().find(|e| log.get(e.index as usize - 1) != Some(*e));
                    if let Some(e) = missing {
                        let v = SafetyViolation::LeaderCompleteness { leader: n.id(), term: n.term(), index: e.index };
                        self.flag(v);
                    }
                }
            }
        }

        let log = n.log();
        let commit = n.commit_index() as usize;
        for i in 0..commit.min(self.committed.len()) {
            if log[i] != self.committed[i] {
                self.flag(SafetyViolation::CommittedDivergence { member: n.id(), index: i as u64 + 1 });
                break;
            }
        }
        if commit > self.committed.len() {
            let start = self.committed.len();
            self.committed.extend_from_slice(&log[start..commit]);
        }

        let applied = n.last_applied();
        if applied > 0 {
            let d = state_digest(n.state_machine());
            match self.digests.get(&applied) {
                Some(&seen) if seen != d => self.flag(SafetyViolation::StateMachineSafety { member: n.id(), index: applied }),
                Some(_) => {}
                None => {
                    self.digests.insert(applied, d);
                }
            }
        }
    }

    /// If two logs hold an entry with the same index and term, all earlier entries match.
    pub fn check_log_matching(&mut self, group: &RaftGroup) {
        let nodes: Vec<&RaftNode> = group.live().collect();
        for (i, a) in nodes.iter().enumerate() {
            for b in &nodes[i + 1..] {
                let (la, lb) = (a.log(), b.log());
                let common = la.len().min(lb.len());
                // highest index where terms agree; everything below must be identical
                if let Some(k) = (0..common).rev().find(|&k| la[k].term == lb[k].term) {
                    if la[..=k] != lb[..=k] {
                        let index = (0..=k).find(|&j| la[j] != lb[j]).unwrap_or(k) as u64 + 1;
                        self.flag(SafetyViolation::LogMatching { a: a.id(), b: b.id(), index });
                    }
                }
            }
        }
    }
}
