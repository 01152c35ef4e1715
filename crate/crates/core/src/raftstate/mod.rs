//! Network state layer: Raft consensus over a replicated per-element store.
//!
//! [`RaftNode`] is a pure protocol state machine driven by messages and ticks.
//! [`RaftGroup`] hosts a set of nodes inside a simulation, and [`RaftCluster`]
//! is a self-contained simulated cluster with clients for benchmarks.

mod checker;
mod cluster;
mod group;
mod node;
mod state;

use serde::{Deserialize, Serialize};

use crate::monitors::ReflexCommand;
use crate::simnet::{SimError, VirtualTime};
use crate::telemetry::{ElementId, FlowKey};

pub use checker::{SafetyChecker, SafetyViolation};
pub use cluster::{ArrivalProcess, CommitReceipt, LoadPoint, RaftCluster, RaftClusterConfig};
pub use group::{RaftGroup, RaftWire, SwitchUpdate, RAFT_TIMER_TAG};
pub use node::{Action, PersistentState, RaftNode};
pub use state::{state_digest, ElementState, StateMachine, DEDUP_WINDOW};

pub const KEY_BYTES: usize = 16;
pub const VALUE_BYTES: usize = 64;

pub type MemberId = u32;
pub type ClientId = u32;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RaftError {
    #[error("key must be {KEY_BYTES} bytes, got {0}")]
    BadKeyLength(usize),
    #[error("value must be {VALUE_BYTES} bytes, got {0}")]
    BadValueLength(usize),
    #[error("unknown element {0}")]
    UnknownElement(ElementId),
    #[error("cluster has no leader")]
    NoLeader,
    #[error("no commit before the deadline at {0}")]
    Timeout(VirtualTime),
    #[error("cluster size must be odd and at least 1, got {0}")]
    BadClusterSize(usize),
    #[error("{0} must be positive")]
    NonPositive(&'static str),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Follower,
    Candidate,
    Leader,
}

/// Operator-issued writes through the control-plane interface.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ControlOp {
    SetForwarding { flow: FlowKey, egress_port: u16 },
    RemoveForwarding { flow: FlowKey },
    SetParam { name: String, value: i64 },
    Kv { key: Vec<u8>, value: Vec<u8> },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ControlCommand {
    pub target: ElementId,
    pub op: ControlOp,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Payload {
    KvWrite { element: ElementId, key: Vec<u8>, value: Vec<u8> },
    Reflex(ReflexCommand),
    Control(ControlCommand),
    NoOp,
}

fn check_kv(key: &[u8], value: &[u8]) -> Result<(), RaftError> {
    if key.len() != KEY_BYTES {
        return Err(RaftError::BadKeyLength(key.len()));
    }
    if value.len() != VALUE_BYTES {
        return Err(RaftError::BadValueLength(value.len()));
    }
    Ok(())
}

impl Payload {
    /// Check sizes and targets before anything is replicated.
    pub fn validate(&self, known: impl Fn(ElementId) -> bool) -> Result<(), RaftError> {
        let (target, kv) = match self {
            Payload::NoOp => return Ok(()),
            Payload::KvWrite { element, key, value } => (*element, Some((key, value))),
            Payload::Reflex(c) => (c.target_element, None),
            Payload::Control(c) => match &c.op {
                ControlOp::Kv { key, value } => (c.target, Some((key, value))),
                _ => (c.target, None),
            },
        };
        if let Some((k, v)) = kv {
            check_kv(k, v)?;
        }
        if !known(target) {
            return Err(RaftError::UnknownElement(target));
        }
        Ok(())
    }

    /// Element whose switch receives this entry once applied.
    pub fn switch_target(&self) -> Option<ElementId> {
        match self {
            Payload::Reflex(c) => Some(c.target_element),
            Payload::Control(c) => Some(c.target),
            _ => None,
        }
    }

    /// Rough wire size, for bandwidth-limited links.
    pub fn wire_bytes(&self) -> u32 {
        match self {
            Payload::NoOp => 8,
            Payload::KvWrite { .. } => 8 + (KEY_BYTES + VALUE_BYTES) as u32,
            Payload::Reflex(_) => 64,
            Payload::Control(c) => match &c.op {
                ControlOp::Kv { .. } => 8 + (KEY_BYTES + VALUE_BYTES) as u32,
                _ => 48,
            },
        }
    }

    pub fn kv(element: ElementId, key: [u8; KEY_BYTES], value: [u8; VALUE_BYTES]) -> Self {
        Payload::KvWrite { element, key: key.to_vec(), value: value.to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LogEntry {
    pub term: u64,
    pub index: u64,
    /// Client request that produced the entry, for reply routing and dedup.
    pub origin: Option<(ClientId, u64)>,
    pub payload: Payload,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum RaftMessage {
    RequestVote { term: u64, candidate: MemberId, last_log_index: u64, last_log_term: u64 },
    VoteReply { term: u64, granted: bool },
    AppendEntries { term: u64, leader: MemberId, prev_index: u64, prev_term: u64, entries: Vec<LogEntry>, leader_commit: u64 },
    /// On failure `match_index` is the follower's hint for where to resume.
    AppendReply { term: u64, success: bool, match_index: u64 },
    ClientWrite { client_id: ClientId, request_id: u64, payload: Payload },
    ClientReply { request_id: u64, committed: bool, leader_hint: Option<MemberId> },
}

impl RaftMessage {
    pub fn term(&self) -> Option<u64> {
        match self {
            RaftMessage::RequestVote { term, .. }
            | RaftMessage::VoteReply { term, .. }
            | RaftMessage::AppendEntries { term, .. }
            | RaftMessage::AppendReply { term, .. } => Some(*term),
            _ => None,
        }
    }

    pub fn wire_bytes(&self) -> u32 {
        match self {
            RaftMessage::AppendEntries { entries, .. } => 40 + entries.iter().map(|e| 16 + e.payload.wire_bytes()).sum::<u32>(),
            RaftMessage::ClientWrite { payload, .. } => 16 + payload.wire_bytes(),
            _ => 24,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RaftConfig {
    pub election_timeout_min_ns: u64,
    pub election_timeout_max_ns: u64,
    pub heartbeat_ns: u64,
}

impl Default for RaftConfig {
    fn default() -> Self {
        RaftConfig { election_timeout_min_ns: 150_000, election_timeout_max_ns: 300_000, heartbeat_ns: 50_000 }
    }
}

impl RaftConfig {
    pub fn validate(&self) -> Result<(), RaftError> {
        if self.heartbeat_ns == 0 {
            return Err(RaftError::NonPositive("heartbeat_ns"));
        }
        if self.election_timeout_min_ns == 0 || self.election_timeout_max_ns < self.election_timeout_min_ns {
            return Err(RaftError::NonPositive("election timeout range"));
        }
        Ok(())
    }
}

/// Per-message core time at a Raft node, by message kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServiceProfile {
    pub client_write_ns: u64,
    pub append_entries_ns: u64,
    pub append_reply_ns: u64,
    pub request_vote_ns: u64,
    pub vote_reply_ns: u64,
}

impl Default for ServiceProfile {
    fn default() -> Self {
        ServiceProfile::zero()
    }
}

impl ServiceProfile {
    pub const fn zero() -> Self {
        ServiceProfile { client_write_ns: 0, append_entries_ns: 0, append_reply_ns: 0, request_vote_ns: 0, vote_reply_ns: 0 }
    }

    /// Fitted so a 3-replica write over 43 ns links and a 1 ns switch takes
    /// 1880 ns unloaded, and the leader spends 2 µs per request
    /// (600 for the write plus 700 for each follower reply).
    pub const fn calibrated() -> Self {
        ServiceProfile { client_write_ns: 600, append_entries_ns: 232, append_reply_ns: 700, request_vote_ns: 200, vote_reply_ns: 200 }
    }

    /// Service on the unloaded commit path: write, one follower append, one reply.
    pub fn critical_path_ns(&self) -> u64 {
        self.client_write_ns + self.append_entries_ns + self.append_reply_ns
    }

    /// Leader core time per replicated request in a cluster of `replicas`.
    pub fn leader_ns_per_request(&self, replicas: usize) -> u64 {
        self.client_write_ns + self.append_reply_ns * (replicas as u64 - 1)
    }

    pub fn for_message(&self, m: &RaftMessage) -> u64 {
        match m {
            RaftMessage::ClientWrite { .. } => self.client_write_ns,
            RaftMessage::AppendEntries { .. } => self.append_entries_ns,
            RaftMessage::AppendReply { .. } => self.append_reply_ns,
            RaftMessage::RequestVote { .. } => self.request_vote_ns,
            RaftMessage::VoteReply { .. } => self.vote_reply_ns,
            RaftMessage::ClientReply { .. } => 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn payload_validation() {
        let known = |e: ElementId| e.0 < 4;
        assert!(Payload::kv(ElementId(1), [0; 16], [0; 64]).validate(known).is_ok());
        let short = Payload::KvWrite { element: ElementId(1), key: vec![0; 15], value: vec![0; 64] };
        assert_eq!(short.validate(known), Err(RaftError::BadKeyLength(15)));
        let long = Payload::KvWrite { element: ElementId(1), key: vec![0; 16], value: vec![0; 65] };
        assert_eq!(long.validate(known), Err(RaftError::BadValueLength(65)));
        let far = Payload::kv(ElementId(9), [0; 16], [0; 64]);
        assert_eq!(far.validate(known), Err(RaftError::UnknownElement(ElementId(9))));
        let ctl = Payload::Control(ControlCommand {
            target: ElementId(2),
            op: ControlOp::Kv { key: vec![1; 16], value: vec![1; 3] },
        });
        assert_eq!(ctl.validate(known), Err(RaftError::BadValueLength(3)));
    }

    #[test]
    fn calibrated_profile_numbers() {
        let p = ServiceProfile::calibrated();
        // 4 traversals of 43 + 1 + 43 ns plus the critical path
        assert_eq!(4 * 87 + p.critical_path_ns(), 1880);
        assert_eq!(4 * (43 + 300 + 43) + p.critical_path_ns(), 3076);
        assert_eq!(p.leader_ns_per_request(3), 2000);
    }
}
