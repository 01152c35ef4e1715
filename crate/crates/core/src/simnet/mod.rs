//! Deterministic discrete-event network simulation.
//!
//! Virtual time is integer nanoseconds. Events with equal timestamps fire in
//! insertion order, so a run is fully determined by its topology, node
//! configuration, world behaviour and seed.

mod kernel;
mod rng;
mod stats;
mod time;
mod topology;

pub use kernel::{
    Ctx, Envelope, NodeConfig, NodeCounters, ServiceTime, SimSummary, Simulator, TraceKind, TraceRecord, World,
    DEFAULT_QUEUE_CAPACITY,
};
pub use rng::{derive_seed, SimRng};
pub use stats::{nearest_rank, LatencyStats, StatsSink};
pub use time::{Bandwidth, VirtualTime};
pub use topology::{Link, LinkId, LinkSpec, NodeId, NodeKind, NodeSpec, Route, Topology, TopologySpec};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SimError {
    #[error("duplicate node id `{0}`")]
    DuplicateNode(String),
    #[error("link {link} references unknown node `{endpoint}`")]
    DanglingEndpoint { link: usize, endpoint: String },
    #[error("link endpoints must be distinct (`{0}`)")]
    SelfLoop(String),
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("nodes `{0}` and `{1}` are not connected")]
    Disconnected(String, String),
    #[error("no path from {src} to {dst}")]
    NoPath { src: NodeId, dst: NodeId },
    #[error("event scheduled in the past: now={now}, at={at}")]
    EventInPast { now: VirtualTime, at: VirtualTime },
    #[error("latency end {end} precedes start {start}")]
    NegativeLatency { start: VirtualTime, end: VirtualTime },
    #[error("invariant violated: {0}")]
    Invariant(String),
}
