//! INT telemetry reports: data model, sink extraction, drop reports,
//! duplicate coalescing and the line-oriented trace format.

mod dedup;
mod packet;
mod synth;
mod trace;

use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::simnet::VirtualTime;

pub use dedup::{dedup_coalesce, Deduplicator, ReportStreamStats, DEFAULT_DEDUP_WINDOW};
pub use packet::{sink_extract, IntPacket, PayloadDescriptor, HOP_RECORD_BYTES};
pub use synth::{planted_stream, stream_flow, PlantedAnomaly, PlantedTrace, Spike, StreamSpec};
pub use trace::{format_report, format_trace, parse_report_line, parse_trace};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TelemetryError {
    #[error("report has no hop records")]
    EmptyPath,
    #[error("malformed hop record {hop}: {reason}")]
    MalformedHop { hop: usize, reason: String },
    #[error("hop timestamps decrease at hop {0}")]
    NonMonotonicTimestamps(usize),
    #[error("drop hop index {index} out of range for {hops} hops")]
    DropIndexOutOfRange { index: usize, hops: usize },
    #[error("link utilization {0} outside [0, 1]")]
    UtilizationOutOfRange(String),
    #[error("packet size must be positive")]
    ZeroPacketSize,
    #[error("line rate must be positive")]
    ZeroLineRate,
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Network element (switch) identifier.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ElementId(pub u32);

impl fmt::Display for ElementId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "sw{}", self.0)
    }
}

/// IPv4 5-tuple. Ordered lexicographically by field.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FlowKey {
    pub src_ip: u32,
    pub dst_ip: u32,
    pub src_port: u16,
    pub dst_port: u16,
    pub proto: u8,
}

impl FlowKey {
    pub fn new(src: Ipv4Addr, src_port: u16, dst: Ipv4Addr, dst_port: u16, proto: u8) -> Self {
        FlowKey { src_ip: src.into(), dst_ip: dst.into(), src_port, dst_port, proto }
    }
}

impl fmt::Display for FlowKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{}-{}:{}/{}",
            Ipv4Addr::from(self.src_ip),
            self.src_port,
            Ipv4Addr::from(self.dst_ip),
            self.dst_port,
            self.proto
        )
    }
}

impl FromStr for FlowKey {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (ends, proto) = s.rsplit_once('/').ok_or("missing /proto")?;
        let (src, dst) = ends.split_once('-').ok_or("missing `-` between endpoints")?;
        let endpoint = |e: &str| -> Result<(u32, u16), String> {
            let (ip, port) = e.rsplit_once(':').ok_or_else(|| format!("endpoint `{e}` lacks a port"))?;
            let ip: Ipv4Addr = ip.parse().map_err(|_| format!("bad address `{ip}`"))?;
            let port: u16 = port.parse().map_err(|_| format!("bad port `{port}`"))?;
            Ok((ip.into(), port))
        };
        let (src_ip, src_port) = endpoint(src)?;
        let (dst_ip, dst_port) = endpoint(dst)?;
        let proto: u8 = proto.parse().map_err(|_| format!("bad protocol `{proto}`"))?;
        Ok(FlowKey { src_ip, dst_ip, src_port, dst_port, proto })
    }
}

/// Link utilization in ten-thousandths, `0..=10_000`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u16", into = "u16")]
pub struct Utilization(u16);

impl Utilization {
    pub const SCALE: u16 = 10_000;

    pub fn from_ten_thousandths(v: u16) -> Result<Self, TelemetryError> {
        if v > Self::SCALE {
            return Err(TelemetryError::UtilizationOutOfRange(format!("{v}/10000")));
        }
        Ok(Utilization(v))
    }

    pub fn from_fraction(f: f64) -> Result<Self, TelemetryError> {
        if !(0.0..=1.0).contains(&f) {
            return Err(TelemetryError::UtilizationOutOfRange(f.to_string()));
        }
        Ok(Utilization((f * f64::from(Self::SCALE)).round() as u16))
    }

    pub fn ten_thousandths(self) -> u16 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        f64::from(self.0) / f64::from(Self::SCALE)
    }
}

impl TryFrom<u16> for Utilization {
    type Error = TelemetryError;
    fn try_from(v: u16) -> Result<Self, Self::Error> {
        Utilization::from_ten_thousandths(v)
    }
}

impl From<Utilization> for u16 {
    fn from(u: Utilization) -> u16 {
        u.0
    }
}

impl fmt::Display for Utilization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:04}", self.0 / Self::SCALE, self.0 % Self::SCALE)
    }
}

/// Metadata one switch appends to a packet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HopMetadata {
    pub switch_id: ElementId,
    pub ingress_port: u16,
    pub egress_port: u16,
    pub queue_id: u32,
    pub queue_depth: u32,
    pub hop_latency_ns: VirtualTime,
    pub link_utilization: Utilization,
    pub timestamp_ns: VirtualTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DropReason {
    QueueOverflow,
    AclDeny,
    TtlExpired,
    Other,
}

impl DropReason {
    pub const ALL: [DropReason; 4] =
        [DropReason::QueueOverflow, DropReason::AclDeny, DropReason::TtlExpired, DropReason::Other];

    /// Numeric code used by the classifier's `drop_reason` field; 0 means "no drop".
    pub fn code(self) -> u32 {
        match self {
            DropReason::QueueOverflow => 1,
            DropReason::AclDeny => 2,
            DropReason::TtlExpired => 3,
            DropReason::Other => 4,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.code() == code)
    }

    pub fn name(self) -> &'static str {
        match self {
            DropReason::QueueOverflow => "QueueOverflow",
            DropReason::AclDeny => "AclDeny",
            DropReason::TtlExpired => "TtlExpired",
            DropReason::Other => "Other",
        }
    }
}

impl FromStr for DropReason {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|r| r.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown drop reason `{s}`"))
    }
}

impl fmt::Display for DropReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DropInfo {
    pub hop_index: usize,
    pub reason: DropReason,
}

/// One telemetry record: a flow, its per-hop metadata in path order, and optional drop info.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct IntReport {
    pub flow: FlowKey,
    pub seq: u64,
    pub hops: Vec<HopMetadata>,
    pub pkt_size_bytes: u32,
    pub drop: Option<DropInfo>,
}

impl IntReport {
    pub fn new(
        flow: FlowKey,
        seq: u64,
        hops: Vec<HopMetadata>,
        pkt_size_bytes: u32,
        drop: Option<DropInfo>,
    ) -> Result<Self, TelemetryError> {
        let r = IntReport { flow, seq, hops, pkt_size_bytes, drop };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<(), TelemetryError> {
        if self.hops.is_empty() {
            return Err(TelemetryError::EmptyPath);
        }
        if let Some(i) = self.hops.windows(2).position(|w| w[1].timestamp_ns < w[0].timestamp_ns) {
            return Err(TelemetryError::NonMonotonicTimestamps(i + 1));
        }
        if let Some(d) = self.drop {
            if d.hop_index >= self.hops.len() {
                return Err(TelemetryError::DropIndexOutOfRange { index: d.hop_index, hops: self.hops.len() });
            }
        }
        Ok(())
    }

    pub fn last_hop(&self) -> &HopMetadata {
        self.hops.last().expect("validated report has at least one hop")
    }
}

/// Total latency across all hops of a report.
pub fn path_latency(report: &IntReport) -> VirtualTime {
    report.hops.iter().map(|h| h.hop_latency_ns).sum()
}

/// Build a report for a packet dropped at the last hop in `hops_so_far`.
pub fn make_drop_report(
    flow: FlowKey,
    seq: u64,
    hops_so_far: Vec<HopMetadata>,
    pkt_size_bytes: u32,
    reason: DropReason,
) -> Result<IntReport, TelemetryError> {
    if hops_so_far.is_empty() {
        return Err(TelemetryError::EmptyPath);
    }
    let hop_index = hops_so_far.len() - 1;
    IntReport::new(flow, seq, hops_so_far, pkt_size_bytes, Some(DropInfo { hop_index, reason }))
}

/// Reports per second generated by a link at line rate when every packet carries INT.
pub fn report_rate_for_link(line_rate_bits_per_s: u64, pkt_size_bytes: u32) -> Result<u64, TelemetryError> {
    if pkt_size_bytes == 0 {
        return Err(TelemetryError::ZeroPacketSize);
    }
    if line_rate_bits_per_s == 0 {
        return Err(TelemetryError::ZeroLineRate);
    }
    Ok(line_rate_bits_per_s / (u64::from(pkt_size_bytes) * 8))
}
