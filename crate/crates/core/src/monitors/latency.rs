use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use super::{CommandBody, CommandStamp, MonitorError, MonitorId, ReflexCommand};
use crate::classifier::{ProjectedHop, ProjectedReport, ReportFields};
use crate::simnet::VirtualTime;
use crate::telemetry::{ElementId, FlowKey};

pub const LATENCY_WINDOW: usize = 10;

fn default_window() -> usize {
    LATENCY_WINDOW
}

fn default_ecmp() -> u16 {
    4
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathLatencyConfig {
    pub id: MonitorId,
    pub threshold_ns: u64,
    #[serde(default = "default_window")]
    pub window: usize,
    /// Equal-cost ports per switch; a reroute moves the flow to the next one.
    #[serde(default = "default_ecmp")]
    pub ecmp_ports: u16,
}

impl PathLatencyConfig {
    pub fn new(id: MonitorId, threshold_ns: u64) -> Self {
        PathLatencyConfig { id, threshold_ns, window: LATENCY_WINDOW, ecmp_ports: default_ecmp() }
    }
}

/// Circular buffer of a flow's most recent path latencies.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FlowLatencyState {
    window: VecDeque<u64>,
    sum: u64,
}

impl FlowLatencyState {
    pub fn len(&self) -> usize {
        self.window.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }

    pub fn sum(&self) -> u64 {
        self.sum
    }

    pub fn samples(&self) -> impl Iterator<Item = u64> + '_ {
        self.window.iter().copied()
    }

    fn push(&mut self, cap: usize, v: u64) {
        if self.window.len() == cap {
            self.sum -= self.window.pop_front().expect("full window");
        }
        self.window.push_back(v);
        self.sum += v;
    }

    fn reset(&mut self) {
        self.window.clear();
        self.sum = 0;
    }

    /// `v > avg + threshold`, in integers: `v * n > sum + threshold * n`.
    fn exceeds(&self, v: u64, threshold: u64) -> bool {
        let n = self.window.len() as u128;
        u128::from(v) * n > u128::from(self.sum) + u128::from(threshold) * n
    }
}

/// Pick the switch to reroute at: the one just upstream of the hop whose
/// latency rose most above its baseline, or the first switch.
pub fn choose_reroute_switch(hops: &[(ElementId, u64)], baselines: &[Option<u64>]) -> Option<ElementId> {
    let first = hops.first()?.0;
    let mut best: Option<(usize, i128)> = None;
    for (i, ((_, lat), base)) in hops.iter().zip(baselines).enumerate() {
        let excess = i128::from(*lat) - i128::from(base.unwrap_or(*lat));
        if best.is_none_or(|(_, e)| excess > e) {
            best = Some((i, excess));
        }
    }
    Some(match best {
        Some((i, e)) if e > 0 && i > 0 => hops[i - 1].0,
        _ => first,
    })
}

/// Moving-average path latency detector, one window per flow.
#[derive(Debug, Clone)]
pub struct PathLatencyDetector {
    cfg: PathLatencyConfig,
    flows: HashMap<FlowKey, FlowLatencyState>,
    /// Per (switch, flow) hop latency EWMA, alpha = 1/16.
    baselines: HashMap<(ElementId, FlowKey), u64>,
    stamp: CommandStamp,
}

impl PathLatencyDetector {
    pub const REQUIRED: ReportFields =
        ReportFields::HOP_LATENCY.union(ReportFields::SWITCH_ID).union(ReportFields::EGRESS_PORT);

    pub fn new(cfg: PathLatencyConfig, stamp: CommandStamp) -> Result<Self, MonitorError> {
        if cfg.threshold_ns == 0 {
            return Err(MonitorError::NonPositive("threshold_ns"));
        }
        if cfg.window == 0 {
            return Err(MonitorError::NonPositive("window"));
        }
        if cfg.ecmp_ports == 0 {
            return Err(MonitorError::NonPositive("ecmp_ports"));
        }
        Ok(PathLatencyDetector { cfg, flows: HashMap::new(), baselines: HashMap::new(), stamp })
    }

    pub fn flow_state(&self, flow: &FlowKey) -> Option<&FlowLatencyState> {
        self.flows.get(flow)
    }

    pub fn tracked_flows(&self) -> usize {
        self.flows.len()
    }

    fn hop_fields(h: &ProjectedHop) -> Result<(ElementId, u64, u16), MonitorError> {
        Ok((
            h.switch_id.ok_or(MonitorError::MissingField("switch_id"))?,
            h.hop_latency_ns.ok_or(MonitorError::MissingField("hop_latency"))?.as_nanos(),
            h.egress_port.ok_or(MonitorError::MissingField("egress_port"))?,
        ))
    }

    pub fn observe(&mut self, report: &ProjectedReport, now: VirtualTime) -> Result<Option<ReflexCommand>, MonitorError> {
        if report.hops.is_empty() {
            return Err(MonitorError::EmptyPath);
        }
        let hops = report.hops.iter().map(Self::hop_fields).collect::<Result<Vec<_>, _>>()?;
        let flow = report.flow;
        let latency: u64 = hops.iter().map(|h| h.1).sum();
        let state = self.flows.entry(flow).or_default();

        let mut cmd = None;
        if state.len() == self.cfg.window && state.exceeds(latency, self.cfg.threshold_ns) {
            let pairs: Vec<(ElementId, u64)> = hops.iter().map(|h| (h.0, h.1)).collect();
            let bases: Vec<Option<u64>> = hops.iter().map(|h| self.baselines.get(&(h.0, flow)).copied()).collect();
            let at = choose_reroute_switch(&pairs, &bases).expect("non-empty path");
            let port = hops.iter().find(|h| h.0 == at).map_or(0, |h| h.2);
            let body = CommandBody::Reroute { flow, at_switch: at, new_egress_port: (port + 1) % self.cfg.ecmp_ports };
            cmd = Some(self.stamp.stamp(now, at, body));
            state.reset();
        }
        state.push(self.cfg.window, latency);

        for &(sw, lat, _) in &hops {
            self.baselines
                .entry((sw, flow))
                .and_modify(|b| *b = (*b as i64 + (lat as i64 - *b as i64) / 16) as u64)
                .or_insert(lat);
        }
        Ok(cmd)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::telemetry::tests::{flow, hop};
    use crate::telemetry::IntReport;
    use crate::simnet::SimRng;

    fn det(threshold: u64) -> PathLatencyDetector {
        PathLatencyDetector::new(PathLatencyConfig::new(MonitorId::new("lat"), threshold), CommandStamp::new(MonitorId::new("lat"), 0))
            .unwrap()
    }

    fn report(f: u32, lats: &[u64]) -> ProjectedReport {
        let hops = lats.iter().enumerate().map(|(i, &l)| hop(i as u32 + 1, l, i as u64)).collect();
        ProjectedReport::full(&IntReport::new(flow(f), 0, hops, 64, None).unwrap())
    }

    #[test]
    fn spike_after_full_window_fires() {
        let mut d = det(500);
        for _ in 0..10 {
            assert!(d.observe(&report(1, &[1000]), VirtualTime::ZERO).unwrap().is_none());
        }
        let c = d.observe(&report(1, &[1600]), VirtualTime::from_nanos(7)).unwrap().unwrap();
        assert!(matches!(c.body, CommandBody::Reroute { flow: f, .. } if f == flow(1)));
        assert_eq!(c.issued_at, VirtualTime::from_nanos(7));
        // window restarts with the spike as its first sample
        let st = d.flow_state(&flow(1)).unwrap();
        assert_eq!((st.len(), st.sum()), (1, 1600));
    }

    #[test]
    fn equal_to_average_plus_threshold_does_not_fire() {
        let mut d = det(500);
        for _ in 0..10 {
            d.observe(&report(1, &[1000]), VirtualTime::ZERO).unwrap();
        }
        assert!(d.observe(&report(1, &[1500]), VirtualTime::ZERO).unwrap().is_none());
    }

    #[test]
    fn constant_stream_never_fires() {
        let mut d = det(1);
        for _ in 0..1000 {
            assert!(d.observe(&report(2, &[1000]), VirtualTime::ZERO).unwrap().is_none());
        }
    }

    #[test]
    fn nine_priors_is_not_enough() {
        let mut d = det(500);
        for _ in 0..9 {
            d.observe(&report(1, &[1000]), VirtualTime::ZERO).unwrap();
        }
        assert!(d.observe(&report(1, &[9000]), VirtualTime::ZERO).unwrap().is_none());
    }

    #[test]
    fn reroute_switch_choice() {
        let hops = [(ElementId(1), 200), (ElementId(2), 900), (ElementId(3), 300)];
        let base = [Some(200), Some(200), Some(200)];
        assert_eq!(choose_reroute_switch(&hops, &base), Some(ElementId(1)));
        let flat = [(ElementId(1), 200), (ElementId(2), 200), (ElementId(3), 200)];
        assert_eq!(choose_reroute_switch(&flat, &base), Some(ElementId(1)));
        // increase at the first hop goes to the first switch too
        let first = [(ElementId(4), 900), (ElementId(5), 200)];
        assert_eq!(choose_reroute_switch(&first, &[Some(200), Some(200)]), Some(ElementId(4)));
        assert_eq!(choose_reroute_switch(&[(ElementId(9), 5)], &[None]), Some(ElementId(9)));
        assert_eq!(choose_reroute_switch(&[], &[]), None);
    }

    #[test]
    fn reroute_targets_switch_before_increase() {
        let mut d = det(300);
        for _ in 0..10 {
            d.observe(&report(1, &[200, 200, 200]), VirtualTime::ZERO).unwrap();
        }
        let c = d.observe(&report(1, &[200, 900, 300]), VirtualTime::ZERO).unwrap().unwrap();
        assert_eq!(c.target_element, ElementId(1));
        assert_eq!(c.body, CommandBody::Reroute { flow: flow(1), at_switch: ElementId(1), new_egress_port: 3 });
    }

    #[test]
    fn missing_projection_is_an_error() {
        let r = IntReport::new(flow(1), 0, vec![hop(1, 5, 0)], 64, None).unwrap();
        let p = ProjectedReport::project(&r, ReportFields::SWITCH_ID);
        assert_eq!(det(5).observe(&p, VirtualTime::ZERO), Err(MonitorError::MissingField("hop_latency")));
    }

    /// From-scratch replay: keep the full sample history and the index of
    /// the last reset, recompute the window every step.
    fn brute_force(stream: &[(u32, u64)], threshold: u64) -> Vec<usize> {
        let mut hist: HashMap<u32, Vec<u64>> = HashMap::new();
        let mut fired = Vec::new();
        for (i, &(f, l)) in stream.iter().enumerate() {
            let h = hist.entry(f).or_default();
            let w = &h[h.len().saturating_sub(LATENCY_WINDOW)..];
            if w.len() == LATENCY_WINDOW {
                let avg = w.iter().sum::<u64>() as f64 / w.len() as f64;
                if l as f64 > avg + threshold as f64 {
                    fired.push(i);
                    h.clear();
                }
            }
            h.push(l);
        }
        fired
    }

    #[test]
    fn incremental_matches_brute_force() {
        let mut rng = SimRng::new(42);
        let stream: Vec<(u32, u64)> = (0..10_000)
            .map(|_| {
                let f = rng.below(7) as u32;
                let base = 1000 + u64::from(f) * 100;
                let l = if rng.chance(0.03) { base + 200 + rng.below(2000) } else { base + rng.below(150) };
                (f, l)
            })
            .collect();
        let mut d = det(250);
        let mut got = Vec::new();
        for (i, &(f, l)) in stream.iter().enumerate() {
            if d.observe(&report(f, &[l]), VirtualTime::ZERO).unwrap().is_some() {
                got.push(i);
            }
            let st = d.flow_state(&flow(f)).unwrap();
            assert!(st.len() <= LATENCY_WINDOW);
            assert_eq!(st.sum(), st.samples().sum::<u64>());
        }
        let want = brute_force(&stream, 250);
        assert!(want.len() > 50, "stream should exercise firing ({})", want.len());
        assert_eq!(got, want);
    }

    #[test]
    fn window_discipline() {
        let mut d = det(1_000_000);
        let lats: Vec<u64> = (1..=25).map(|i| i * 7).collect();
        for (n, &l) in lats.iter().enumerate() {
            d.observe(&report(3, &[l]), VirtualTime::ZERO).unwrap();
            let st = d.flow_state(&flow(3)).unwrap();
            let k = (n + 1).min(LATENCY_WINDOW);
            assert_eq!(st.len(), k);
            assert_eq!(st.sum(), lats[n + 1 - k..=n].iter().sum::<u64>());
        }
    }

    #[test]
    fn recreated_detector_only_names_flows_it_has_seen() {
        let mut rng = SimRng::new(5);
        let stream: Vec<(u32, u64)> =
            (0..4000).map(|_| (rng.below(5) as u32, if rng.chance(0.05) { 5000 } else { 1000 })).collect();
        let mut d = det(500);
        let mut seen: HashMap<FlowKey, usize> = HashMap::new();
        let mut fires = 0;
        for (i, &(f, l)) in stream.iter().enumerate() {
            if i == 2000 {
                d = det(500);
                seen.clear();
            }
            *seen.entry(flow(f)).or_default() += 1;
            if let Some(c) = d.observe(&report(f, &[l]), VirtualTime::ZERO).unwrap() {
                // needs a full window of post-restart samples first
                assert!(seen[&c.body.flow().unwrap()] > LATENCY_WINDOW);
                fires += 1;
            }
        }
        assert!(fires > 0);
    }
}
