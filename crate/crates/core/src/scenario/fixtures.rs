use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{write_atomic, ScenarioError};
use crate::classifier::synth::{generate_rules, RuleProfile};
use crate::classifier::{format_rule, ProjectedReport};
use crate::monitors::{CommandBody, CommandStamp, MonitorError, PathLatencyConfig, PathLatencyDetector, ReflexCommand};
use crate::simnet::VirtualTime;
use crate::telemetry::{format_trace, planted_stream, ElementId, FlowKey, IntReport, PlantedAnomaly, PlantedTrace, Spike, StreamSpec};

pub const FIXTURE_RULES: &str = "acl_100.rules";
pub const FIXTURE_TRACE: &str = "trace_anomaly1.int";
pub const FIXTURE_SIDECAR: &str = "trace_anomaly1.json";

/// A reroute the detector is expected to issue.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpectedCommand {
    pub report_index: usize,
    pub flow: FlowKey,
    pub at_switch: ElementId,
    pub new_egress_port: u16,
}

/// Ground truth shipped next to a generated trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sidecar {
    pub trace: String,
    pub stream: StreamSpec,
    pub anomalies: Vec<PlantedAnomaly>,
    pub expected_commands: Vec<ExpectedCommand>,
}

/// One reroute per planted spike, moving the flow to the next ECMP port.
pub fn expected_commands(trace: &PlantedTrace, ecmp_ports: u16) -> Vec<ExpectedCommand> {
    trace
        .anomalies
        .iter()
        .map(|a| ExpectedCommand {
            report_index: a.stream_index,
            flow: a.flow,
            at_switch: a.reroute_at,
            new_egress_port: (a.old_egress_port + 1) % ecmp_ports,
        })
        .collect()
}

/// Run a standalone path-latency detector over full reports.
pub fn detector_commands(reports: &[IntReport], cfg: PathLatencyConfig) -> Result<Vec<(usize, ReflexCommand)>, MonitorError> {
    let stamp = CommandStamp::new(cfg.id.clone(), 0);
    let mut d = PathLatencyDetector::new(cfg, stamp)?;
    let mut out = Vec::new();
    for (i, r) in reports.iter().enumerate() {
        if let Some(c) = d.observe(&ProjectedReport::full(r), VirtualTime::from_nanos(i as u64))? {
            out.push((i, c));
        }
    }
    Ok(out)
}

impl ExpectedCommand {
    pub fn matches(&self, index: usize, cmd: &ReflexCommand) -> bool {
        let want = CommandBody::Reroute { flow: self.flow, at_switch: self.at_switch, new_egress_port: self.new_egress_port };
        index == self.report_index && cmd.target_element == self.at_switch && cmd.body == want
    }
}

const RAFT_SWEEP: &str = r#"# Three replicas behind one switch, calibrated service times.
# --set raft.switch_latency_ns=1 gives the single-switch testbed numbers.
scenario = "raft_sweep"
experiments = ["raft_latency", "raft_load"]

[raft]
replicas = 3
link_latency_ns = 43
switch_latency_ns = 300

[workload]
loads_rps = [318000, 350000, 400000, 450000, 480000, 507000]
count = 10000
"#;

const REFLEX_E2E: &str = r#"scenario = "reflex_e2e"
experiments = ["direct", "e2e"]
trace = "trace_anomaly1.int"

[topology]
elements = 4
link_latency_ns = 43
switch_latency_ns = 300

[[monitors]]
kind = "path_latency"
id = "m0"
threshold_ns = 500

[workload]
report_rate_rps = 10000000
max_e2e_ns = 10000
"#;

const MONITOR_ANOMALY: &str = r#"scenario = "monitor_anomaly"
experiments = ["monitor"]
trace = "trace_anomaly1.int"
sidecar = "trace_anomaly1.json"

[[monitors]]
kind = "path_latency"
id = "m0"
threshold_ns = 500

[workload]
report_rate_rps = 10000000
expect_commands = 1
"#;

const CLASSIFY_ACL: &str = r#"scenario = "classify_acl"
experiments = ["classify"]
ruleset = "acl_100.rules"

[workload]
keys = 10000
engine = "learned"
"#;

pub(super) const SCENARIOS: [(&str, &str); 4] = [
    ("raft_sweep.toml", RAFT_SWEEP),
    ("reflex_e2e.toml", REFLEX_E2E),
    ("monitor_anomaly.toml", MONITOR_ANOMALY),
    ("classify_acl.toml", CLASSIFY_ACL),
];

pub fn anomaly_stream(seed: u64) -> StreamSpec {
    StreamSpec {
        flows: 8,
        reports_per_flow: 40,
        spikes: vec![Spike { flow: 2, report: 12, hop: 1, extra_ns: 5_000 }],
        seed,
        ..Default::default()
    }
}

/// Write the rule set, anomaly trace, its sidecar and the default scenarios
/// into `dir`. Same seed, same bytes.
pub fn seed_fixtures(dir: &Path, seed: u64) -> Result<Vec<PathBuf>, ScenarioError> {
    let mut written = Vec::new();
    let mut put = |name: &str, bytes: &[u8]| -> Result<(), ScenarioError> {
        let p = dir.join(name);
        write_atomic(&p, bytes)?;
        written.push(p);
        Ok(())
    };

    let rules = generate_rules(RuleProfile::Acl, 100, seed);
    let mut text = format!("# {} synthetic ACL rules, seed {seed}\n", rules.len());
    for r in rules.rules() {
        text.push_str(&format_rule(r));
        text.push('\n');
    }
    put(FIXTURE_RULES, text.as_bytes())?;

    let stream = anomaly_stream(seed);
    let trace = planted_stream(&stream).map_err(|e| ScenarioError::config("fixtures.stream", e))?;
    let body = format!("# planted spikes: see {FIXTURE_SIDECAR}\n{}", format_trace(&trace.reports));
    put(FIXTURE_TRACE, body.as_bytes())?;

    let sidecar = Sidecar {
        trace: FIXTURE_TRACE.into(),
        expected_commands: expected_commands(&trace, 4),
        anomalies: trace.anomalies,
        stream,
    };
    let mut json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    json.push('\n');
    put(FIXTURE_SIDECAR, json.as_bytes())?;

    for (name, body) in SCENARIOS {
        put(name, body.as_bytes())?;
    }
    Ok(written)
}
