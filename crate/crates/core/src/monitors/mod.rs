//! Monitoring layer: detectors that turn projected telemetry reports into
//! reflex commands. All monitor state is soft and may be dropped at any time.

mod latency;
mod microburst;
mod threshold;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::classifier::{ProjectedReport, ReportFields};
use crate::simnet::VirtualTime;
use crate::telemetry::{ElementId, FlowKey};

pub use latency::{choose_reroute_switch, FlowLatencyState, PathLatencyConfig, PathLatencyDetector, LATENCY_WINDOW};
pub use microburst::{MicroburstConfig, MicroburstDetector, QueueState, DEFAULT_BURST_WINDOW};
pub use threshold::{threshold_observe, ThresholdConfig, ThresholdMonitor};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MonitorError {
    #[error("report is missing projected field `{0}`")]
    MissingField(&'static str),
    #[error("unknown report field `{0}`")]
    UnknownField(String),
    #[error("{0} must be positive")]
    NonPositive(&'static str),
    #[error("report has no hops")]
    EmptyPath,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MonitorId(String);

impl MonitorId {
    pub fn new(id: impl Into<String>) -> Self {
        MonitorId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for MonitorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CommandBody {
    Reroute { flow: FlowKey, at_switch: ElementId, new_egress_port: u16 },
    Throttle { flow: FlowKey, rate_bits_per_s: u64 },
    SetParam { name: String, value: i64 },
    UpdateRule { table: String, entry: Vec<u8> },
}

impl CommandBody {
    pub fn kind(&self) -> &'static str {
        match self {
            CommandBody::Reroute { .. } => "reroute",
            CommandBody::Throttle { .. } => "throttle",
            CommandBody::SetParam { .. } => "set_param",
            CommandBody::UpdateRule { .. } => "update_rule",
        }
    }

    pub fn flow(&self) -> Option<FlowKey> {
        match self {
            CommandBody::Reroute { flow, .. } | CommandBody::Throttle { flow, .. } => Some(*flow),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ReflexCommand {
    pub command_id: u64,
    pub origin: MonitorId,
    pub issued_at: VirtualTime,
    pub target_element: ElementId,
    pub body: CommandBody,
}

/// Issues command ids for one monitor. Ids are `base + n`, so monitors given
/// disjoint bases never collide within a run.
#[derive(Debug, Clone)]
pub struct CommandStamp {
    origin: MonitorId,
    next: u64,
}

impl CommandStamp {
    pub fn new(origin: MonitorId, base: u64) -> Self {
        CommandStamp { origin, next: base }
    }

    pub fn origin(&self) -> &MonitorId {
        &self.origin
    }

    pub fn stamp(&mut self, now: VirtualTime, target: ElementId, body: CommandBody) -> ReflexCommand {
        let command_id = self.next;
        self.next += 1;
        ReflexCommand { command_id, origin: self.origin.clone(), issued_at: now, target_element: target, body }
    }
}

/// Monitor configuration as it appears in scenario files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MonitorSpec {
    PathLatency(PathLatencyConfig),
    Microburst(MicroburstConfig),
    Threshold(ThresholdConfig),
}

impl MonitorSpec {
    pub fn id(&self) -> &MonitorId {
        match self {
            MonitorSpec::PathLatency(c) => &c.id,
            MonitorSpec::Microburst(c) => &c.id,
            MonitorSpec::Threshold(c) => &c.id,
        }
    }
}

#[derive(Debug, Clone)]
enum Detector {
    PathLatency(PathLatencyDetector),
    Microburst(MicroburstDetector),
    Threshold(ThresholdMonitor),
}

/// A configured monitor instance. Single writer: one report stream feeds it.
#[derive(Debug, Clone)]
pub struct Monitor {
    spec: MonitorSpec,
    base: u64,
    detector: Detector,
}

impl Monitor {
    pub fn new(spec: MonitorSpec, id_base: u64) -> Result<Self, MonitorError> {
        let detector = Self::detector(&spec, id_base)?;
        Ok(Monitor { spec, base: id_base, detector })
    }

    fn detector(spec: &MonitorSpec, base: u64) -> Result<Detector, MonitorError> {
        let stamp = CommandStamp::new(spec.id().clone(), base);
        Ok(match spec {
            MonitorSpec::PathLatency(c) => Detector::PathLatency(PathLatencyDetector::new(c.clone(), stamp)?),
            MonitorSpec::Microburst(c) => Detector::Microburst(MicroburstDetector::new(c.clone(), stamp)?),
            MonitorSpec::Threshold(c) => Detector::Threshold(ThresholdMonitor::new(c.clone(), stamp)?),
        })
    }

    pub fn id(&self) -> &MonitorId {
        self.spec.id()
    }

    pub fn spec(&self) -> &MonitorSpec {
        &self.spec
    }

    /// Fields a rule must project for this monitor to work.
    pub fn required_fields(&self) -> ReportFields {
        match &self.detector {
            Detector::PathLatency(_) => PathLatencyDetector::REQUIRED,
            Detector::Microburst(_) => MicroburstDetector::REQUIRED,
            Detector::Threshold(t) => t.required_fields(),
        }
    }

    pub fn observe(&mut self, report: &ProjectedReport, now: VirtualTime) -> Result<Vec<ReflexCommand>, MonitorError> {
        match &mut self.detector {
            Detector::PathLatency(d) => Ok(d.observe(report, now)?.into_iter().collect()),
            Detector::Microburst(d) => d.observe(report, now),
            Detector::Threshold(d) => Ok(d.observe(report, now)?.into_iter().collect()),
        }
    }

    /// Drop all detector state, as after a crash. Command ids keep counting
    /// from a fresh block so they stay unique.
    pub fn reset(&mut self) {
        self.base += 1 << 20;
        self.detector = Self::detector(&self.spec, self.base).expect("spec was valid at construction");
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MonitorBudget {
    pub cycles: u64,
    /// One instruction per cycle.
    pub instructions: u64,
    pub ns: u64,
}

/// Per-report cycle budget for a core at `core_hz` keeping up with `reports_per_s`.
pub fn monitor_budget(reports_per_s: u64, core_hz: u64) -> Result<MonitorBudget, MonitorError> {
    if reports_per_s == 0 {
        return Err(MonitorError::NonPositive("reports_per_s"));
    }
    if core_hz == 0 {
        return Err(MonitorError::NonPositive("core_hz"));
    }
    let cycles = core_hz / reports_per_s;
    Ok(MonitorBudget { cycles, instructions: cycles, ns: 1_000_000_000 / reports_per_s })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budget_at_full_line_rate() {
        // 100 Gb/s of 1500 B packets
        let b = monitor_budget(8_333_333, 3_200_000_000).unwrap();
        assert_eq!(b.cycles, 384);
        assert_eq!(b.ns, 120);
        assert_eq!(monitor_budget(8_300_000, 3_200_000_000).unwrap().cycles, 385);
        let fast = monitor_budget(20_000_000, 3_200_000_000).unwrap();
        assert_eq!((fast.cycles, fast.ns), (160, 50));
    }

    #[test]
    fn budget_rejects_zero() {
        assert_eq!(monitor_budget(0, 1), Err(MonitorError::NonPositive("reports_per_s")));
        assert_eq!(monitor_budget(1, 0), Err(MonitorError::NonPositive("core_hz")));
    }

    #[test]
    fn spec_from_toml() {
        let s: MonitorSpec = toml::from_str("id = \"m1\"\nkind = \"path_latency\"\nthreshold_ns = 500\n").unwrap();
        assert_eq!(s.id(), &MonitorId::new("m1"));
        assert!(matches!(s, MonitorSpec::PathLatency(ref c) if c.threshold_ns == 500 && c.window == 10));
        let bad: Result<MonitorSpec, _> = toml::from_str("id = \"m1\"\nkind = \"path_latency\"\nthreshhold_ns = 5\n");
        assert!(bad.is_err());
    }

    #[test]
    fn reset_keeps_ids_unique() {
        use crate::telemetry::tests::{flow, hop};
        use crate::telemetry::IntReport;
        let spec = MonitorSpec::Threshold(ThresholdConfig::new(MonitorId::new("t"), "queue_depth", 1.0));
        let mut m = Monitor::new(spec, 0).unwrap();
        let r = ProjectedReport::full(&IntReport::new(flow(1), 0, vec![hop(1, 10, 0)], 64, None).unwrap());
        let a = m.observe(&r, VirtualTime::ZERO).unwrap();
        m.reset();
        let b = m.observe(&r, VirtualTime::ZERO).unwrap();
        assert_eq!(a.len(), 1);
        assert_ne!(a[0].command_id, b[0].command_id);
    }
}
