use serde::{Deserialize, Serialize};

use super::{ElementId, FlowKey, HopMetadata, IntReport, TelemetryError, Utilization};
use crate::simnet::{SimRng, VirtualTime};

/// A latency spike planted on one hop of one report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Spike {
    pub flow: u32,
    /// Position of the report within its flow.
    pub report: u32,
    pub hop: usize,
    pub extra_ns: u64,
}

/// Round-robin report stream over `flows` flows sharing one path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamSpec {
    pub flows: u32,
    pub reports_per_flow: u32,
    pub path: Vec<u32>,
    pub hop_latency_ns: u64,
    /// Per-hop latency noise, uniform in `[0, jitter_ns]`.
    pub jitter_ns: u64,
    pub pkt_size_bytes: u32,
    pub spikes: Vec<Spike>,
    pub seed: u64,
}

impl Default for StreamSpec {
    fn default() -> Self {
        StreamSpec {
            flows: 4,
            reports_per_flow: 20,
            path: vec![1, 0, 2],
            hop_latency_ns: 200,
            jitter_ns: 20,
            pkt_size_bytes: 1500,
            spikes: Vec::new(),
            seed: 1,
        }
    }
}

/// Ground truth for one planted spike.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedAnomaly {
    /// Index of the spiked report in the whole stream.
    pub stream_index: usize,
    pub flow: FlowKey,
    pub seq: u64,
    pub hop: usize,
    /// Switch just upstream of the slow hop (the first switch if the first hop is slow).
    pub reroute_at: ElementId,
    /// Egress port that switch currently uses for the flow.
    pub old_egress_port: u16,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlantedTrace {
    pub reports: Vec<IntReport>,
    pub anomalies: Vec<PlantedAnomaly>,
}

pub fn stream_flow(f: u32) -> FlowKey {
    FlowKey { src_ip: 0x0a00_0001 + (f << 8), dst_ip: 0x0a80_0001, src_port: 10_000 + f as u16, dst_port: 443, proto: 6 }
}

fn egress_port(flow: u32, hop: usize) -> u16 {
    ((flow as usize + hop) % 4) as u16
}

/// Generate a stream and the spikes planted in it.
///
/// Spikes are only recorded as ground truth; whether a detector sees them
/// depends on its window and threshold.
pub fn planted_stream(spec: &StreamSpec) -> Result<PlantedTrace, TelemetryError> {
    if spec.path.is_empty() {
        return Err(TelemetryError::EmptyPath);
    }
    if spec.pkt_size_bytes == 0 {
        return Err(TelemetryError::ZeroPacketSize);
    }
    for s in &spec.spikes {
        if s.hop >= spec.path.len() || s.flow >= spec.flows || s.report >= spec.reports_per_flow {
            return Err(TelemetryError::MalformedHop { hop: s.hop, reason: format!("spike {s:?} outside the stream") });
        }
    }
    let mut rng = SimRng::labeled(spec.seed, "telemetry.stream");
    let mut reports = Vec::new();
    let mut anomalies = Vec::new();
    for k in 0..spec.reports_per_flow {
        for f in 0..spec.flows {
            let idx = reports.len();
            let mut t = idx as u64 * 1_000;
            let mut hops = Vec::with_capacity(spec.path.len());
            for (h, &sw) in spec.path.iter().enumerate() {
                let mut lat = spec.hop_latency_ns + rng.below(spec.jitter_ns + 1);
                if let Some(s) = spec.spikes.iter().find(|s| s.flow == f && s.report == k && s.hop == h) {
                    lat += s.extra_ns;
                    let up = if h == 0 { 0 } else { h - 1 };
                    anomalies.push(PlantedAnomaly {
                        stream_index: idx,
                        flow: stream_flow(f),
                        seq: u64::from(k),
                        hop: h,
                        reroute_at: ElementId(spec.path[up]),
                        old_egress_port: egress_port(f, up),
                    });
                }
                hops.push(HopMetadata {
                    switch_id: ElementId(sw),
                    ingress_port: 0,
                    egress_port: egress_port(f, h),
                    queue_id: 0,
                    queue_depth: (lat / 100) as u32,
                    hop_latency_ns: VirtualTime::from_nanos(lat),
                    link_utilization: Utilization::from_ten_thousandths(5_000)?,
                    timestamp_ns: VirtualTime::from_nanos(t),
                });
                t += lat;
            }
            reports.push(IntReport::new(stream_flow(f), u64::from(k), hops, spec.pkt_size_bytes, None)?);
        }
    }
    Ok(PlantedTrace { reports, anomalies })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_ground_truth() {
        let spec = StreamSpec {
            spikes: vec![Spike { flow: 2, report: 12, hop: 1, extra_ns: 5_000 }],
            ..Default::default()
        };
        let t = planted_stream(&spec).unwrap();
        assert_eq!(t.reports.len(), 80);
        let a = &t.anomalies[0];
        assert_eq!(a.stream_index, 12 * 4 + 2);
        assert_eq!(a.reroute_at, ElementId(1));
        assert_eq!(a.old_egress_port, 2);
        let spiked = &t.reports[a.stream_index];
        assert!(spiked.hops[1].hop_latency_ns.as_nanos() >= 5_200);
        assert_eq!(spiked.flow, stream_flow(2));
    }

    #[test]
    fn deterministic() {
        let spec = StreamSpec::default();
        assert_eq!(planted_stream(&spec).unwrap(), planted_stream(&spec).unwrap());
    }

    #[test]
    fn spike_outside_stream() {
        let spec = StreamSpec { spikes: vec![Spike { flow: 9, report: 0, hop: 0, extra_ns: 1 }], ..Default::default() };
        assert!(planted_stream(&spec).is_err());
    }
}
