use serde::{Deserialize, Serialize};

use super::{ClassifierError, MonitorId, Rule};
use crate::simnet::VirtualTime;
use crate::telemetry::{DropInfo, ElementId, FlowKey, IntReport, Utilization};

bitflags::bitflags! {
    /// Report fields a rule action may forward. The flow key is always kept.
    #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
    pub struct ReportFields: u16 {
        const SWITCH_ID = 1 << 0;
        const INGRESS_PORT = 1 << 1;
        const EGRESS_PORT = 1 << 2;
        const QUEUE_ID = 1 << 3;
        const QUEUE_DEPTH = 1 << 4;
        const HOP_LATENCY = 1 << 5;
        const LINK_UTILIZATION = 1 << 6;
        const TIMESTAMP = 1 << 7;
        const SEQ = 1 << 8;
        const PKT_SIZE = 1 << 9;
        const DROP = 1 << 10;
    }
}

const FIELD_NAMES: [(&str, ReportFields); 11] = [
    ("switch_id", ReportFields::SWITCH_ID),
    ("ingress_port", ReportFields::INGRESS_PORT),
    ("egress_port", ReportFields::EGRESS_PORT),
    ("queue_id", ReportFields::QUEUE_ID),
    ("queue_depth", ReportFields::QUEUE_DEPTH),
    ("hop_latency", ReportFields::HOP_LATENCY),
    ("link_utilization", ReportFields::LINK_UTILIZATION),
    ("timestamp", ReportFields::TIMESTAMP),
    ("seq", ReportFields::SEQ),
    ("pkt_size", ReportFields::PKT_SIZE),
    ("drop", ReportFields::DROP),
];

impl ReportFields {
    pub fn from_field_name(name: &str) -> Result<Self, ClassifierError> {
        FIELD_NAMES
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, f)| *f)
            .ok_or_else(|| ClassifierError::UnknownProjectionField(name.to_string()))
    }

    pub fn from_names<'a>(names: impl IntoIterator<Item = &'a str>) -> Result<Self, ClassifierError> {
        names.into_iter().try_fold(ReportFields::empty(), |acc, n| Ok(acc | ReportFields::from_field_name(n)?))
    }

    pub fn names(self) -> Vec<&'static str> {
        FIELD_NAMES.iter().filter(|(_, f)| self.contains(*f)).map(|(n, _)| *n).collect()
    }
}

impl Serialize for ReportFields {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.names().serialize(s)
    }
}

impl<'de> Deserialize<'de> for ReportFields {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let names = Vec::<String>::deserialize(d)?;
        ReportFields::from_names(names.iter().map(String::as_str)).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProjectedHop {
    pub switch_id: Option<ElementId>,
    pub ingress_port: Option<u16>,
    pub egress_port: Option<u16>,
    pub queue_id: Option<u32>,
    pub queue_depth: Option<u32>,
    pub hop_latency_ns: Option<VirtualTime>,
    pub link_utilization: Option<Utilization>,
    pub timestamp_ns: Option<VirtualTime>,
}

/// A report reduced to the fields a monitor asked for.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProjectedReport {
    pub flow: FlowKey,
    pub seq: Option<u64>,
    pub pkt_size_bytes: Option<u32>,
    /// `None` when not projected; `Some(None)` when projected and the packet was not dropped.
    pub drop: Option<Option<DropInfo>>,
    pub hops: Vec<ProjectedHop>,
    pub fields: ReportFields,
}

impl ProjectedReport {
    pub fn project(r: &IntReport, fields: ReportFields) -> Self {
        let keep = |f: ReportFields| fields.contains(f);
        let hops = r
            .hops
            .iter()
            .map(|h| ProjectedHop {
                switch_id: keep(ReportFields::SWITCH_ID).then_some(h.switch_id),
                ingress_port: keep(ReportFields::INGRESS_PORT).then_some(h.ingress_port),
                egress_port: keep(ReportFields::EGRESS_PORT).then_some(h.egress_port),
                queue_id: keep(ReportFields::QUEUE_ID).then_some(h.queue_id),
                queue_depth: keep(ReportFields::QUEUE_DEPTH).then_some(h.queue_depth),
                hop_latency_ns: keep(ReportFields::HOP_LATENCY).then_some(h.hop_latency_ns),
                link_utilization: keep(ReportFields::LINK_UTILIZATION).then_some(h.link_utilization),
                timestamp_ns: keep(ReportFields::TIMESTAMP).then_some(h.timestamp_ns),
            })
            .collect();
        ProjectedReport {
            flow: r.flow,
            seq: keep(ReportFields::SEQ).then_some(r.seq),
            pkt_size_bytes: keep(ReportFields::PKT_SIZE).then_some(r.pkt_size_bytes),
            drop: keep(ReportFields::DROP).then_some(r.drop),
            hops,
            fields,
        }
    }

    pub fn full(r: &IntReport) -> Self {
        ProjectedReport::project(r, ReportFields::all())
    }
}

impl From<&IntReport> for ProjectedReport {
    fn from(r: &IntReport) -> Self {
        ProjectedReport::full(r)
    }
}

/// One projected copy of the report per destination of the matched rule.
pub fn dispatch(report: &IntReport, matched: Option<&Rule>) -> Vec<(MonitorId, ProjectedReport)> {
    let Some(rule) = matched else {
        return Vec::new();
    };
    let projected = ProjectedReport::project(report, rule.action.projection);
    rule.action.destinations.iter().map(|d| (d.clone(), projected.clone())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::tests::{rule, wild};
    use crate::classifier::Action;
    use crate::telemetry::tests::{flow, hop};

    #[test]
    fn replicate_and_project() {
        let r = IntReport::new(flow(3), 1, vec![hop(1, 100, 0), hop(2, 200, 5)], 64, None).unwrap();
        let mut rl = rule(0, 1, wild());
        rl.action = Action {
            destinations: vec![MonitorId::new("m1"), MonitorId::new("m2")],
            projection: ReportFields::from_names(["hop_latency", "queue_depth"]).unwrap(),
        };
        let out = dispatch(&r, Some(&rl));
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].0, MonitorId::new("m1"));
        for (_, p) in &out {
            assert_eq!(p.flow, flow(3));
            assert!(p.hops.iter().all(|h| h.link_utilization.is_none() && h.switch_id.is_none()));
            assert_eq!(p.hops[1].hop_latency_ns, Some(VirtualTime::from_nanos(200)));
            assert_eq!(p.hops[0].queue_depth, Some(3));
            assert_eq!(p.seq, None);
        }
    }

    #[test]
    fn no_match_no_dispatch() {
        let r = IntReport::new(flow(3), 1, vec![hop(1, 100, 0)], 64, None).unwrap();
        assert!(dispatch(&r, None).is_empty());
    }

    #[test]
    fn unknown_field_name() {
        assert_eq!(
            ReportFields::from_names(["bogus"]),
            Err(ClassifierError::UnknownProjectionField("bogus".into()))
        );
    }
}
