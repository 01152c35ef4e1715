use serde::{Deserialize, Serialize};

use super::{CommandBody, CommandStamp, MonitorError, MonitorId, ReflexCommand};
use crate::classifier::{ProjectedReport, ReportFields};
use crate::simnet::VirtualTime;
use crate::telemetry::ElementId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdConfig {
    pub id: MonitorId,
    pub field: String,
    /// Utilization limits are fractions; everything else is in the field's own unit.
    pub limit: f64,
}

impl ThresholdConfig {
    pub fn new(id: MonitorId, field: &str, limit: f64) -> Self {
        ThresholdConfig { id, field: field.to_string(), limit }
    }
}

fn field_flag(field: &str) -> Result<ReportFields, MonitorError> {
    match field {
        "queue_depth" | "hop_latency" | "link_utilization" | "queue_id" | "ingress_port" | "egress_port"
        | "pkt_size" => Ok(ReportFields::from_field_name(field).expect("known field")),
        _ => Err(MonitorError::UnknownField(field.to_string())),
    }
}

/// Compare one report field against a fixed limit.
///
/// Per-hop fields use the largest value on the path. On a strict excess the
/// result names the offending switch and a `SetParam` alert carrying the raw
/// value (utilization in ten-thousandths).
pub fn threshold_observe(
    report: &ProjectedReport,
    field: &str,
    limit: f64,
) -> Result<Option<(ElementId, CommandBody)>, MonitorError> {
    let flag = field_flag(field)?;
    if !report.fields.contains(flag) {
        return Err(MonitorError::MissingField(ReportFields::names(flag)[0]));
    }
    let mut worst: Option<(f64, i64, ElementId)> = None;
    let mut consider = |cmp: f64, raw: i64, sw: ElementId| {
        if worst.is_none_or(|w| cmp > w.0) {
            worst = Some((cmp, raw, sw));
        }
    };
    if field == "pkt_size" {
        let v = report.pkt_size_bytes.expect("projected");
        let sw = report.hops.first().and_then(|h| h.switch_id).unwrap_or(ElementId(0));
        consider(f64::from(v), i64::from(v), sw);
    } else {
        for h in &report.hops {
            let sw = h.switch_id.unwrap_or(ElementId(0));
            let (cmp, raw) = match field {
                "queue_depth" => (f64::from(h.queue_depth.unwrap_or(0)), i64::from(h.queue_depth.unwrap_or(0))),
                "queue_id" => (f64::from(h.queue_id.unwrap_or(0)), i64::from(h.queue_id.unwrap_or(0))),
                "ingress_port" => (f64::from(h.ingress_port.unwrap_or(0)), i64::from(h.ingress_port.unwrap_or(0))),
                "egress_port" => (f64::from(h.egress_port.unwrap_or(0)), i64::from(h.egress_port.unwrap_or(0))),
                "hop_latency" => {
                    let ns = h.hop_latency_ns.unwrap_or_default().as_nanos();
                    (ns as f64, ns as i64)
                }
                _ => {
                    let u = h.link_utilization.unwrap_or_default();
                    (u.as_f64(), i64::from(u.ten_thousandths()))
                }
            };
            consider(cmp, raw, sw);
        }
    }
    Ok(worst.filter(|w| w.0 > limit).map(|(_, raw, sw)| {
        (sw, CommandBody::SetParam { name: format!("alert.{field}"), value: raw })
    }))
}

#[derive(Debug, Clone)]
pub struct ThresholdMonitor {
    cfg: ThresholdConfig,
    stamp: CommandStamp,
}

impl ThresholdMonitor {
    pub fn new(cfg: ThresholdConfig, stamp: CommandStamp) -> Result<Self, MonitorError> {
        field_flag(&cfg.field)?;
        Ok(ThresholdMonitor { cfg, stamp })
    }

    pub fn required_fields(&self) -> ReportFields {
        field_flag(&self.cfg.field).expect("checked at construction") | ReportFields::SWITCH_ID
    }

    pub fn observe(&mut self, report: &ProjectedReport, now: VirtualTime) -> Result<Option<ReflexCommand>, MonitorError> {
        Ok(threshold_observe(report, &self.cfg.field, self.cfg.limit)?.map(|(sw, body)| self.stamp.stamp(now, sw, body)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::telemetry::tests::{flow, hop};
    use crate::telemetry::{IntReport, Utilization};

    fn util_report(u: u16) -> ProjectedReport {
        let mut h = hop(4, 100, 0);
        h.link_utilization = Utilization::from_ten_thousandths(u).unwrap();
        ProjectedReport::full(&IntReport::new(flow(1), 0, vec![hop(3, 100, 0), h], 64, None).unwrap())
    }

    #[test]
    fn utilization_limits() {
        let (sw, body) = threshold_observe(&util_report(9500), "link_utilization", 0.9).unwrap().unwrap();
        assert_eq!(sw, ElementId(4));
        assert_eq!(body, CommandBody::SetParam { name: "alert.link_utilization".into(), value: 9500 });
        assert_eq!(threshold_observe(&util_report(9000), "link_utilization", 0.9).unwrap(), None);
    }

    #[test]
    fn unknown_or_unprojected_field() {
        let r = util_report(9500);
        assert_eq!(threshold_observe(&r, "temperature", 1.0), Err(MonitorError::UnknownField("temperature".into())));
        let raw = IntReport::new(flow(1), 0, vec![hop(3, 100, 0)], 64, None).unwrap();
        let p = ProjectedReport::project(&raw, ReportFields::HOP_LATENCY);
        assert_eq!(threshold_observe(&p, "queue_depth", 1.0), Err(MonitorError::MissingField("queue_depth")));
    }

    #[test]
    fn stateless() {
        let a = util_report(9500);
        let b = util_report(100);
        let first = threshold_observe(&a, "link_utilization", 0.9).unwrap();
        for _ in 0..3 {
            threshold_observe(&b, "link_utilization", 0.9).unwrap();
            assert_eq!(threshold_observe(&a, "link_utilization", 0.9).unwrap(), first);
        }
    }

    #[test]
    fn latency_and_size() {
        let r = ProjectedReport::full(&IntReport::new(flow(1), 0, vec![hop(1, 700, 0), hop(2, 300, 1)], 1500, None).unwrap());
        assert_eq!(threshold_observe(&r, "hop_latency", 500.0).unwrap().unwrap().0, ElementId(1));
        assert!(threshold_observe(&r, "pkt_size", 1500.0).unwrap().is_none());
        assert!(threshold_observe(&r, "pkt_size", 1499.0).unwrap().is_some());
    }
}
