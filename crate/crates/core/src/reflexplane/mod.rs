//! The reflex plane: telemetry → classification → monitoring → network state,
//! composed inside one simulation.

mod plane;
#[cfg(test)]
mod tests;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::classifier::{ClassifierError, EngineConfig, MonitorId, ShardMode};
use crate::monitors::{MonitorError, MonitorSpec, PathLatencyConfig};
use crate::raftstate::{MemberId, RaftConfig, RaftError, ServiceProfile};
use crate::simnet::{LatencyStats, SimError, VirtualTime, DEFAULT_QUEUE_CAPACITY};
use crate::telemetry::{ElementId, FlowKey, ReportStreamStats};

pub use plane::Plane;

/// Stage labels used in [`RunReport::stages`].
pub const STAGE_CLASSIFY: &str = "classify";
pub const STAGE_MONITOR: &str = "monitor";
pub const STAGE_DIRECT: &str = "direct";
pub const STAGE_COMMIT: &str = "commit";
pub const STAGE_E2E: &str = "e2e";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PlaneError {
    #[error("raft cluster size must be odd, got {0}")]
    EvenRaft(usize),
    #[error("at least one classifier node is required")]
    NoClassifier,
    #[error("at least one monitor is required")]
    NoMonitor,
    #[error("duplicate monitor id `{0}`")]
    DuplicateMonitor(MonitorId),
    #[error("rule {rule} sends to undefined monitor `{monitor}`")]
    UnknownMonitor { rule: u32, monitor: MonitorId },
    #[error("rule {rule} does not project {fields:?} needed by monitor `{monitor}`")]
    MissingProjection { rule: u32, monitor: MonitorId, fields: Vec<&'static str> },
    #[error("unknown preset `{0}` (expected nanopu or zero)")]
    UnknownPreset(String),
    #[error("{0} must be positive")]
    NonPositive(&'static str),
    #[error("scenario produced no reflex command")]
    NoCommand,
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Monitor(#[from] MonitorError),
    #[error(transparent)]
    Raft(#[from] RaftError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    /// Network elements `sw0..swN`; plane hosts hang off `sw0`, the others off `sw0` too.
    pub elements: u32,
    pub link_latency_ns: u64,
    pub switch_latency_ns: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig { elements: 4, link_latency_ns: 43, switch_latency_ns: 300 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierStage {
    pub nodes: usize,
    pub shard_mode: ShardMode,
    pub service_ns: u64,
    pub engine: EngineConfig,
}

impl Default for ClassifierStage {
    fn default() -> Self {
        ClassifierStage { nodes: 1, shard_mode: ShardMode::Replicate, service_ns: 50, engine: EngineConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RaftStage {
    pub replicas: usize,
    pub service: ServiceProfile,
    pub timing: RaftConfig,
    pub preferred_leader: Option<MemberId>,
    pub mac_serial_ns: u64,
    pub retry_timeout_ns: u64,
}

impl Default for RaftStage {
    fn default() -> Self {
        RaftStage {
            replicas: 3,
            service: ServiceProfile::calibrated(),
            timing: RaftConfig::default(),
            preferred_leader: Some(0),
            mac_serial_ns: 0,
            retry_timeout_ns: 1_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlaneConfig {
    pub network: NetworkConfig,
    pub classifier: ClassifierStage,
    pub monitors: Vec<MonitorSpec>,
    pub monitor_service_ns: u64,
    pub raft: RaftStage,
    /// NIC delay on each of receive and transmit at classifier and monitor nodes.
    pub mac_serial_ns: u64,
    pub queue_capacity: usize,
    /// Monitors write commands straight to the target switch instead of through Raft.
    pub direct_reflex: bool,
    /// Idle time simulated after the last injected report.
    pub drain_ns: u64,
    pub seed: u64,
}

impl Default for PlaneConfig {
    fn default() -> Self {
        PlaneConfig::nanopu()
    }
}

impl PlaneConfig {
    /// nanoPU-class cores: 50 ns per report at classifiers and monitors,
    /// 26 ns NIC delay each way, calibrated Raft.
    pub fn nanopu() -> Self {
        PlaneConfig {
            network: NetworkConfig::default(),
            classifier: ClassifierStage::default(),
            monitors: vec![MonitorSpec::PathLatency(PathLatencyConfig::new(MonitorId::new("m0"), 500))],
            monitor_service_ns: 50,
            raft: RaftStage::default(),
            mac_serial_ns: 26,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            direct_reflex: false,
            drain_ns: 2_000_000,
            seed: 1,
        }
    }

    /// Every service time, NIC delay and link latency zero.
    pub fn zero() -> Self {
        let mut c = PlaneConfig::nanopu();
        c.network.link_latency_ns = 0;
        c.network.switch_latency_ns = 0;
        c.classifier.service_ns = 0;
        c.monitor_service_ns = 0;
        c.raft.service = ServiceProfile::zero();
        c.mac_serial_ns = 0;
        c
    }

    pub fn preset(name: &str) -> Result<Self, PlaneError> {
        match name {
            "nanopu" => Ok(PlaneConfig::nanopu()),
            "zero" => Ok(PlaneConfig::zero()),
            _ => Err(PlaneError::UnknownPreset(name.to_string())),
        }
    }

    pub fn validate(&self) -> Result<(), PlaneError> {
        if self.raft.replicas == 0 || self.raft.replicas % 2 == 0 {
            return Err(PlaneError::EvenRaft(self.raft.replicas));
        }
        if self.classifier.nodes == 0 {
            return Err(PlaneError::NoClassifier);
        }
        if self.monitors.is_empty() {
            return Err(PlaneError::NoMonitor);
        }
        let mut seen = std::collections::HashSet::new();
        for m in &self.monitors {
            if !seen.insert(m.id()) {
                return Err(PlaneError::DuplicateMonitor(m.id().clone()));
            }
        }
        if self.network.elements == 0 {
            return Err(PlaneError::NonPositive("network.elements"));
        }
        if self.queue_capacity == 0 {
            return Err(PlaneError::NonPositive("queue_capacity"));
        }
        if self.raft.retry_timeout_ns == 0 {
            return Err(PlaneError::NonPositive("raft.retry_timeout_ns"));
        }
        self.raft.timing.validate()?;
        Ok(())
    }
}

/// Timestamps of one command from the report that caused it to the switch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReflexTrace {
    pub command_id: u64,
    pub report_id: u64,
    pub monitor: MonitorId,
    pub kind: String,
    pub flow: Option<FlowKey>,
    pub target: ElementId,
    /// Report reaches the classifier NIC.
    pub report_ingress: VirtualTime,
    pub classify_done: VirtualTime,
    pub monitor_ingress: VirtualTime,
    pub monitor_decision: VirtualTime,
    /// Command leaves the monitor NIC.
    pub monitor_egress: VirtualTime,
    /// Leader applied the command and sent it to the switch.
    pub raft_commit: Option<VirtualTime>,
    pub switch_arrival: Option<VirtualTime>,
}

impl ReflexTrace {
    pub fn e2e(&self) -> Option<VirtualTime> {
        self.switch_arrival.map(|t| t - self.report_ingress)
    }

    /// Stage durations in chain order; they sum to [`e2e`](Self::e2e).
    pub fn stages(&self) -> Vec<(&'static str, VirtualTime)> {
        let mut v = vec![
            ("classify", self.classify_done - self.report_ingress),
            ("to_monitor", self.monitor_ingress - self.classify_done),
            ("monitor", self.monitor_decision - self.monitor_ingress),
        ];
        match (self.raft_commit, self.switch_arrival) {
            (Some(c), Some(s)) => {
                v.push(("commit", c - self.monitor_decision));
                v.push(("to_switch", s - c));
            }
            (None, Some(s)) => v.push(("to_switch", s - self.monitor_decision)),
            _ => {}
        }
        v
    }

    pub fn is_monotone(&self) -> bool {
        let mut t = vec![self.report_ingress, self.classify_done, self.monitor_ingress, self.monitor_decision];
        t.extend(self.raft_commit);
        t.extend(self.switch_arrival);
        t.windows(2).all(|w| w[0] <= w[1]) && self.monitor_egress >= self.monitor_decision
    }
}

/// Outcome of one [`Plane::inject_reports`] call.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub reports_in: u64,
    pub dedup: ReportStreamStats,
    pub classified: u64,
    pub unmatched: u64,
    pub monitor_processed: u64,
    pub monitor_errors: u64,
    pub commands: u64,
    /// Commands naming an element outside the plane; never sent.
    pub invalid_commands: u64,
    pub switch_updates: u64,
    pub drops: BTreeMap<String, u64>,
    pub stages: BTreeMap<String, LatencyStats>,
    /// Monitor-stage completions per second between the first and last completion.
    pub throughput_rps: f64,
    pub traces: Vec<ReflexTrace>,
}

impl RunReport {
    pub fn total_drops(&self) -> u64 {
        self.drops.values().sum()
    }

    pub fn stage(&self, label: &str) -> LatencyStats {
        self.stages.get(label).cloned().unwrap_or_default()
    }
}
