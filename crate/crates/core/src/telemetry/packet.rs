use serde::{Deserialize, Serialize};

use super::{DropInfo, ElementId, FlowKey, HopMetadata, IntReport, TelemetryError, Utilization};
use crate::simnet::VirtualTime;

/// Size of one encoded hop record in the INT metadata stack.
///
/// Layout (big-endian): switch_id u32, ingress u16, egress u16, queue_id u32,
/// queue_depth u32, hop_latency u64, utilization u16, reserved u16, timestamp u64.
pub const HOP_RECORD_BYTES: usize = 36;

/// A data packet carrying an INT metadata stack.
///
/// Each switch pushes its record on top of the stack, so the newest hop comes
/// first in `stack`; the sink reverses it into path order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntPacket {
    pub flow: FlowKey,
    pub seq: u64,
    pub size_bytes: u32,
    /// Hop count as written in the INT shim header.
    pub hop_count: u8,
    pub stack: Vec<u8>,
    pub drop: Option<DropInfo>,
}

/// What the sink keeps of the original packet once INT is stripped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PayloadDescriptor {
    pub flow: FlowKey,
    pub seq: u64,
    pub size_bytes: u32,
}

impl IntPacket {
    pub fn new(flow: FlowKey, seq: u64, size_bytes: u32) -> Self {
        IntPacket { flow, seq, size_bytes, hop_count: 0, stack: Vec::new(), drop: None }
    }

    /// Called by each switch on the path, in traversal order.
    pub fn push_hop(&mut self, hop: &HopMetadata) {
        let mut rec = Vec::with_capacity(HOP_RECORD_BYTES);
        rec.extend_from_slice(&hop.switch_id.0.to_be_bytes());
        rec.extend_from_slice(&hop.ingress_port.to_be_bytes());
        rec.extend_from_slice(&hop.egress_port.to_be_bytes());
        rec.extend_from_slice(&hop.queue_id.to_be_bytes());
        rec.extend_from_slice(&hop.queue_depth.to_be_bytes());
        rec.extend_from_slice(&hop.hop_latency_ns.as_nanos().to_be_bytes());
        rec.extend_from_slice(&hop.link_utilization.ten_thousandths().to_be_bytes());
        rec.extend_from_slice(&0u16.to_be_bytes());
        rec.extend_from_slice(&hop.timestamp_ns.as_nanos().to_be_bytes());
        debug_assert_eq!(rec.len(), HOP_RECORD_BYTES);
        self.stack.splice(0..0, rec);
        self.hop_count = self.hop_count.saturating_add(1);
    }

    pub fn from_report(report: &IntReport) -> Self {
        let mut p = IntPacket::new(report.flow, report.seq, report.pkt_size_bytes);
        for h in &report.hops {
            p.push_hop(h);
        }
        p.drop = report.drop;
        p
    }
}

fn decode_hop(index: usize, rec: &[u8]) -> Result<HopMetadata, TelemetryError> {
    let u16_at = |o: usize| u16::from_be_bytes([rec[o], rec[o + 1]]);
    let u32_at = |o: usize| u32::from_be_bytes(rec[o..o + 4].try_into().unwrap());
    let u64_at = |o: usize| u64::from_be_bytes(rec[o..o + 8].try_into().unwrap());
    let util = Utilization::from_ten_thousandths(u16_at(24))
        .map_err(|e| TelemetryError::MalformedHop { hop: index, reason: e.to_string() })?;
    if u16_at(26) != 0 {
        return Err(TelemetryError::MalformedHop { hop: index, reason: "reserved bits set".into() });
    }
    Ok(HopMetadata {
        switch_id: ElementId(u32_at(0)),
        ingress_port: u16_at(4),
        egress_port: u16_at(6),
        queue_id: u32_at(8),
        queue_depth: u32_at(12),
        hop_latency_ns: VirtualTime::from_nanos(u64_at(16)),
        link_utilization: util,
        timestamp_ns: VirtualTime::from_nanos(u64_at(28)),
    })
}

/// Strip the INT stack from a packet and turn it into a report with hops in traversal order.
pub fn sink_extract(packet: &IntPacket) -> Result<(PayloadDescriptor, IntReport), TelemetryError> {
    if packet.hop_count == 0 && packet.stack.is_empty() {
        return Err(TelemetryError::EmptyPath);
    }
    let expected = usize::from(packet.hop_count) * HOP_RECORD_BYTES;
    if packet.stack.len() != expected {
        return Err(TelemetryError::MalformedHop {
            hop: packet.stack.len() / HOP_RECORD_BYTES,
            reason: format!("stack is {} bytes, header declares {} hops", packet.stack.len(), packet.hop_count),
        });
    }
    let n = usize::from(packet.hop_count);
    let mut hops = Vec::with_capacity(n);
    // records are newest-first; walk from the bottom of the stack
    for (i, rec) in packet.stack.chunks_exact(HOP_RECORD_BYTES).rev().enumerate() {
        hops.push(decode_hop(i, rec)?);
    }
    let report = IntReport::new(packet.flow, packet.seq, hops, packet.size_bytes, packet.drop)?;
    let payload = PayloadDescriptor { flow: packet.flow, seq: packet.seq, size_bytes: packet.size_bytes };
    Ok((payload, report))
}
