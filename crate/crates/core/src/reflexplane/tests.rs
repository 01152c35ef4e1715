use super::*;
use crate::classifier::{Action, FieldMatcher, ReportFields, Rule, RuleSet, Schema, FIELD_COUNT};
use crate::raftstate::{ControlCommand, ControlOp};
use crate::telemetry::{planted_stream, stream_flow, Spike, StreamSpec};

fn spiked(reports_per_flow: u32) -> StreamSpec {
    StreamSpec {
        reports_per_flow,
        spikes: vec![Spike { flow: 2, report: 12, hop: 1, extra_ns: 5_000 }],
        ..Default::default()
    }
}

#[test]
fn presets() {
    let n = PlaneConfig::preset("nanopu").unwrap();
    assert_eq!(n.mac_serial_ns, 26);
    assert_eq!(n.monitor_service_ns, 50);
    assert_eq!(n.network.link_latency_ns, 43);
    let z = PlaneConfig::preset("zero").unwrap();
    assert_eq!(z.classifier.service_ns + z.monitor_service_ns + z.mac_serial_ns, 0);
    assert!(matches!(PlaneConfig::preset("fast"), Err(PlaneError::UnknownPreset(_))));
}

#[test]
fn config_errors() {
    let mut c = PlaneConfig::nanopu();
    c.raft.replicas = 4;
    assert_eq!(Plane::build(c, None).err(), Some(PlaneError::EvenRaft(4)));

    let mut c = PlaneConfig::nanopu();
    c.monitors.push(c.monitors[0].clone());
    assert!(matches!(Plane::build(c, None), Err(PlaneError::DuplicateMonitor(_))));
}

fn one_rule(dest: &str, projection: ReportFields) -> RuleSet {
    let rule = Rule {
        rule_id: 7,
        priority: 0,
        matchers: vec![FieldMatcher::Wildcard; FIELD_COUNT],
        action: Action { destinations: vec![MonitorId::new(dest)], projection },
    };
    RuleSet::new(Schema::reflex(), vec![rule]).unwrap()
}

#[test]
fn rules_must_name_known_monitors_with_their_fields() {
    let err = Plane::build(PlaneConfig::nanopu(), Some(one_rule("ghost", ReportFields::all()))).err().unwrap();
    assert!(matches!(err, PlaneError::UnknownMonitor { rule: 7, .. }), "{err}");
    let err = Plane::build(PlaneConfig::nanopu(), Some(one_rule("m0", ReportFields::SWITCH_ID))).err().unwrap();
    assert!(matches!(err, PlaneError::MissingProjection { rule: 7, .. }), "{err}");
}

#[test]
fn quiet_stream_issues_nothing() {
    let mut p = Plane::build(PlaneConfig::nanopu(), None).unwrap();
    p.quiesce().unwrap();
    let trace = planted_stream(&StreamSpec { flows: 5, reports_per_flow: 20, ..Default::default() }).unwrap();
    let run = p.inject_reports(&trace.reports, 1_000_000).unwrap();
    assert_eq!(run.reports_in, 100);
    assert_eq!(run.classified, 100);
    assert_eq!(run.monitor_processed, 100);
    assert_eq!(run.commands, 0);
    assert_eq!(run.total_drops(), 0);
    assert!(run.traces.is_empty());
}

#[test]
fn planted_spike_reroutes_once() {
    let mut p = Plane::build(PlaneConfig::nanopu(), None).unwrap();
    p.quiesce().unwrap();
    let trace = planted_stream(&spiked(20)).unwrap();
    let truth = &trace.anomalies[0];
    let run = p.inject_reports(&trace.reports, 10_000_000).unwrap();
    assert_eq!(run.commands, 1);
    assert_eq!(run.traces.len(), 1);
    let t = &run.traces[0];
    assert_eq!(t.report_id, truth.stream_index as u64);
    assert_eq!(t.kind, "reroute");
    assert_eq!(t.flow, Some(truth.flow));
    assert_eq!(t.target, truth.reroute_at);
    assert!(t.is_monotone());
    assert!(t.switch_arrival.is_some());
    let sum: u64 = t.stages().iter().map(|(_, d)| d.as_nanos()).sum();
    assert_eq!(Some(VirtualTime::from_nanos(sum)), t.e2e());

    // the committed reroute is visible in the replicated state
    let st = p.read_element_state(truth.reroute_at).unwrap();
    assert_eq!(st.forwarding_table.get(&stream_flow(2)), Some(&((truth.old_egress_port + 1) % 4)));
}

#[test]
fn e2e_matches_hand_computed_chain() {
    let cfg = PlaneConfig::nanopu();
    let mut p = Plane::build(cfg.clone(), None).unwrap();
    p.quiesce().unwrap();
    let trace = planted_stream(&spiked(20)).unwrap();
    let (stats, traces) = p.measure_e2e_reflex(&trace.reports, 10_000_000).unwrap();
    assert_eq!(traces.len(), 1);

    // every host hangs off sw0; sw1 is one more link away
    let (link, sw, mac) = (43, 300, 26);
    let host_to_host = link + sw + link;
    let host_to_sw1 = link + sw + link;
    let p_ = cfg.raft.service;
    let classify = mac + 50;
    let to_monitor = mac + host_to_host + mac;
    let monitor = 50;
    let to_leader = mac + host_to_host;
    let replicate = p_.client_write_ns + host_to_host + p_.append_entries_ns + host_to_host + p_.append_reply_ns;
    let expected = classify + to_monitor + monitor + to_leader + replicate + host_to_sw1;
    assert_eq!(traces[0].e2e().unwrap().as_nanos(), expected);
    assert_eq!(stats.max_ns, expected);
    assert!(expected < 10_000);

    // same seed, same answer
    let mut q = Plane::build(cfg, None).unwrap();
    q.quiesce().unwrap();
    let (_, again) = q.measure_e2e_reflex(&trace.reports, 10_000_000).unwrap();
    assert_eq!(traces, again);
}

#[test]
fn zero_preset_has_zero_latency() {
    let mut p = Plane::build(PlaneConfig::zero(), None).unwrap();
    p.quiesce().unwrap();
    let trace = planted_stream(&spiked(20)).unwrap();
    let (stats, _) = p.measure_e2e_reflex(&trace.reports, 10_000_000).unwrap();
    assert_eq!(stats.max_ns, 0);
}

#[test]
fn direct_reflex_is_nic_service_nic() {
    let trace = planted_stream(&spiked(20)).unwrap();
    for (mac, expected) in [(26, 130), (0, 78)] {
        let mut cfg = PlaneConfig::nanopu();
        cfg.direct_reflex = true;
        cfg.monitor_service_ns = 78;
        cfg.mac_serial_ns = mac;
        let mut p = Plane::build(cfg, None).unwrap();
        let s = p.measure_direct_reflex_latency(&trace.reports, 10_000_000).unwrap();
        assert_eq!((s.p50_ns, s.max_ns), (expected, expected));
    }
}

#[test]
fn overloaded_monitor_drops() {
    let mut cfg = PlaneConfig::nanopu();
    cfg.classifier.service_ns = 10;
    let mut p = Plane::build(cfg, None).unwrap();
    let trace = planted_stream(&StreamSpec { flows: 50, reports_per_flow: 100, ..Default::default() }).unwrap();
    let run = p.inject_reports(&trace.reports, 50_000_000).unwrap();
    assert!(run.drops.get("mon0").copied().unwrap_or(0) > 0, "{:?}", run.drops);
    assert_eq!(run.drops.get("cls0"), None);
    assert_eq!(p.drops("mon0").unwrap(), run.drops["mon0"]);
}

#[test]
fn bottleneck_sets_throughput() {
    let trace = planted_stream(&StreamSpec { flows: 50, reports_per_flow: 100, ..Default::default() }).unwrap();
    for s in [20, 100, 250] {
        let mut cfg = PlaneConfig::nanopu();
        cfg.classifier.service_ns = s;
        let mut p = Plane::build(cfg, None).unwrap();
        let run = p.inject_reports(&trace.reports, 200_000_000).unwrap();
        let bound = 1e9 / (s.max(50) as f64);
        let err = (run.throughput_rps - bound).abs() / bound;
        assert!(err < 0.01, "s={s}: {} vs {bound}", run.throughput_rps);
    }
}

#[test]
fn control_write_lands_in_state() {
    let mut p = Plane::build(PlaneConfig::nanopu(), None).unwrap();
    p.quiesce().unwrap();
    let cmd = ControlCommand { target: ElementId(3), op: ControlOp::SetParam { name: "ecn".into(), value: 9 } };
    let r = p.control_write(cmd).unwrap();
    assert_eq!(r.attempts, 1);
    assert_eq!(p.read_element_state(ElementId(3)).unwrap().params.get("ecn"), Some(&9));

    let bad = ControlCommand { target: ElementId(40), op: ControlOp::SetParam { name: "x".into(), value: 1 } };
    assert!(p.control_write(bad).is_err());
}

#[test]
fn reroute_body_targets_upstream_switch() {
    let mut cfg = PlaneConfig::nanopu();
    cfg.direct_reflex = true;
    let mut p = Plane::build(cfg, None).unwrap();
    let trace = planted_stream(&spiked(20)).unwrap();
    let run = p.inject_reports(&trace.reports, 10_000_000).unwrap();
    assert_eq!(run.traces.len(), 1);
    assert_eq!(run.traces[0].target, ElementId(1));
    assert_eq!(run.stage(STAGE_COMMIT).count, 0);
}
