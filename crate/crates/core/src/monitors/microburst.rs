use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use super::{CommandBody, CommandStamp, MonitorError, MonitorId, ReflexCommand};
use crate::classifier::{ProjectedReport, ReportFields};
use crate::simnet::VirtualTime;
use crate::telemetry::{ElementId, FlowKey};

pub const DEFAULT_BURST_WINDOW: VirtualTime = VirtualTime::from_micros(100);

fn default_window_ns() -> u64 {
    DEFAULT_BURST_WINDOW.as_nanos()
}

fn default_top_k() -> usize {
    3
}

fn default_rate() -> u64 {
    1_000_000_000
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MicroburstConfig {
    pub id: MonitorId,
    pub depth_threshold_pkts: u32,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "default_window_ns")]
    pub window_ns: u64,
    /// Rate each throttled flow is limited to.
    #[serde(default = "default_rate")]
    pub throttle_rate_bits_per_s: u64,
}

impl MicroburstConfig {
    pub fn new(id: MonitorId, depth_threshold_pkts: u32, top_k: usize) -> Self {
        MicroburstConfig {
            id,
            depth_threshold_pkts,
            top_k,
            window_ns: default_window_ns(),
            throttle_rate_bits_per_s: default_rate(),
        }
    }
}

/// One egress queue as seen through telemetry.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct QueueState {
    pub last_depth: u32,
    above: bool,
    events: VecDeque<(VirtualTime, FlowKey)>,
    contributors: BTreeMap<FlowKey, u64>,
}

impl QueueState {
    fn prune(&mut self, now: VirtualTime, window: VirtualTime) {
        let cutoff = now.saturating_sub(window);
        while let Some(&(t, f)) = self.events.front() {
            if t >= cutoff {
                break;
            }
            self.events.pop_front();
            let c = self.contributors.get_mut(&f).expect("counted flow");
            *c -= 1;
            if *c == 0 {
                self.contributors.remove(&f);
            }
        }
    }

    pub fn contributors(&self) -> &BTreeMap<FlowKey, u64> {
        &self.contributors
    }

    /// Packets observed in the trailing window.
    pub fn observed(&self) -> usize {
        self.events.len()
    }

    /// Top `k` flows by count, ties broken by flow key.
    pub fn top(&self, k: usize) -> Vec<(FlowKey, u64)> {
        let mut v: Vec<(FlowKey, u64)> = self.contributors.iter().map(|(f, c)| (*f, *c)).collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        v.truncate(k);
        v
    }
}

/// Per-queue burst detector with hysteresis.
#[derive(Debug, Clone)]
pub struct MicroburstDetector {
    cfg: MicroburstConfig,
    queues: BTreeMap<(ElementId, u32), QueueState>,
    stamp: CommandStamp,
    bursts: u64,
}

impl MicroburstDetector {
    pub const REQUIRED: ReportFields =
        ReportFields::SWITCH_ID.union(ReportFields::QUEUE_ID).union(ReportFields::QUEUE_DEPTH);

    pub fn new(cfg: MicroburstConfig, stamp: CommandStamp) -> Result<Self, MonitorError> {
        if cfg.depth_threshold_pkts == 0 {
            return Err(MonitorError::NonPositive("depth_threshold_pkts"));
        }
        if cfg.top_k == 0 {
            return Err(MonitorError::NonPositive("top_k"));
        }
        if cfg.window_ns == 0 {
            return Err(MonitorError::NonPositive("window_ns"));
        }
        Ok(MicroburstDetector { cfg, queues: BTreeMap::new(), stamp, bursts: 0 })
    }

    pub fn queue(&self, switch: ElementId, queue_id: u32) -> Option<&QueueState> {
        self.queues.get(&(switch, queue_id))
    }

    /// Burst events detected so far.
    pub fn bursts(&self) -> u64 {
        self.bursts
    }

    pub fn observe(&mut self, report: &ProjectedReport, now: VirtualTime) -> Result<Vec<ReflexCommand>, MonitorError> {
        let window = VirtualTime::from_nanos(self.cfg.window_ns);
        let mut out = Vec::new();
        for h in &report.hops {
            let sw = h.switch_id.ok_or(MonitorError::MissingField("switch_id"))?;
            let qid = h.queue_id.ok_or(MonitorError::MissingField("queue_id"))?;
            let depth = h.queue_depth.ok_or(MonitorError::MissingField("queue_depth"))?;
            let q = self.queues.entry((sw, qid)).or_default();
            q.prune(now, window);
            q.events.push_back((now, report.flow));
            *q.contributors.entry(report.flow).or_default() += 1;
            q.last_depth = depth;

            let over = depth > self.cfg.depth_threshold_pkts;
            if over && !q.above {
                self.bursts += 1;
                for (flow, _) in q.top(self.cfg.top_k) {
                    let body = CommandBody::Throttle { flow, rate_bits_per_s: self.cfg.throttle_rate_bits_per_s };
                    out.push(self.stamp.stamp(now, sw, body));
                }
            }
            q.above = over;
        }
        Ok(out)
    }
}
