use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize, Serializer};

use super::{write_atomic, EngineKind, Experiment, ScenarioConfig, ScenarioError, Sidecar};
use crate::classifier::synth::{generate_keys, generate_rules};
use crate::classifier::{classify_linear, parse_ruleset, ClassKey, ClassifierEngine, EngineConfig, RuleSet, Schema};
use crate::raftstate::{RaftCluster, RaftError};
use crate::reflexplane::{Plane, PlaneError, RunReport, STAGE_DIRECT, STAGE_E2E, STAGE_MONITOR};
use crate::simnet::LatencyStats;
use crate::telemetry::{parse_trace, planted_stream, IntReport, StreamSpec};

pub const RESULT_CSV_VERSION: u32 = 1;
pub const RESULT_HEADER: &str = "scenario,experiment,load_rps,count,drops,mean_ns,p50_ns,p99_ns,max_ns";

fn one_decimal<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&format!("{v:.1}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub scenario: String,
    pub experiment: String,
    pub load_rps: u64,
    pub count: u64,
    pub drops: u64,
    #[serde(serialize_with = "one_decimal")]
    pub mean_ns: f64,
    pub p50_ns: u64,
    pub p99_ns: u64,
    pub max_ns: u64,
}

impl ResultRow {
    fn new(cfg: &ScenarioConfig, exp: Experiment, load_rps: u64, count: u64, drops: u64, s: &LatencyStats) -> Self {
        ResultRow {
            scenario: cfg.scenario.clone(),
            experiment: exp.label().to_string(),
            load_rps,
            count,
            drops,
            mean_ns: s.mean_ns,
            p50_ns: s.p50_ns,
            p99_ns: s.p99_ns,
            max_ns: s.max_ns,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub rows: Vec<ResultRow>,
    /// One JSON object per line of the trace dump.
    pub dump: Vec<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifyBench {
    pub engine: EngineKind,
    pub rules: usize,
    pub keys: usize,
    pub matched: u64,
    /// Keys where the engine and the linear scan disagree.
    pub mismatches: u64,
    /// Winning rule id per key; `None` for no match.
    pub histogram: BTreeMap<Option<u32>, u64>,
}

/// Classify every key with `engine`, checking each answer against the linear scan.
pub fn bench_classify(rules: &RuleSet, keys: &[ClassKey], engine: EngineKind) -> ClassifyBench {
    let built = match engine {
        EngineKind::Linear => None,
        EngineKind::Tree => Some(ClassifierEngine::build(rules, EngineConfig { use_learned_index: false, ..Default::default() })),
        EngineKind::Learned => Some(ClassifierEngine::build(rules, EngineConfig::default())),
    };
    let mut b = ClassifyBench { engine, rules: rules.len(), keys: keys.len(), matched: 0, mismatches: 0, histogram: BTreeMap::new() };
    for k in keys {
        let oracle = classify_linear(rules, k).map(|r| r.rule_id);
        let got = match &built {
            Some(e) => e.classify(k).map(|r| r.rule_id),
            None => oracle,
        };
        if got != oracle {
            b.mismatches += 1;
        }
        if got.is_some() {
            b.matched += 1;
        }
        *b.histogram.entry(got).or_default() += 1;
    }
    b
}

fn load_rules(cfg: &ScenarioConfig) -> Result<Option<RuleSet>, ScenarioError> {
    let Some(p) = &cfg.ruleset else { return Ok(None) };
    let path = cfg.resolve(p);
    let text = fs::read_to_string(&path).map_err(|source| ScenarioError::Input { path: path.clone(), source })?;
    parse_ruleset(&text, &Schema::reflex()).map(Some).map_err(|source| ScenarioError::Rules { path, source })
}

fn load_reports(cfg: &ScenarioConfig) -> Result<Vec<IntReport>, ScenarioError> {
    match &cfg.trace {
        Some(p) => {
            let path = cfg.resolve(p);
            let text = fs::read_to_string(&path).map_err(|source| ScenarioError::Input { path: path.clone(), source })?;
            parse_trace(&text).map_err(|source| ScenarioError::Trace { path, source })
        }
        None => {
            let spec = StreamSpec { seed: cfg.seed, ..cfg.workload.stream.clone() };
            planted_stream(&spec).map(|t| t.reports).map_err(|e| ScenarioError::config("workload.stream", e))
        }
    }
}

fn load_sidecar(cfg: &ScenarioConfig) -> Result<Option<Sidecar>, ScenarioError> {
    let Some(p) = &cfg.sidecar else { return Ok(None) };
    let path = cfg.resolve(p);
    let text = fs::read_to_string(&path).map_err(|source| ScenarioError::Input { path: path.clone(), source })?;
    serde_json::from_str(&text).map(Some).map_err(|e| ScenarioError::config(path.display().to_string(), e))
}

fn raft_err(e: RaftError) -> ScenarioError {
    ScenarioError::Plane(PlaneError::Raft(e))
}

fn dump_traces(out: &mut RunOutput, exp: Experiment, run: &RunReport) {
    for t in &run.traces {
        let mut v = serde_json::to_value(t).expect("trace serializes");
        v["experiment"] = exp.label().into();
        out.dump.push(v);
    }
}

fn plane_run(cfg: &ScenarioConfig, direct: bool, reports: &[IntReport]) -> Result<RunReport, ScenarioError> {
    let mut plane = Plane::build(cfg.plane_config(direct), load_rules(cfg)?)?;
    if !direct {
        plane.quiesce()?;
    }
    Ok(plane.inject_reports(reports, cfg.workload.report_rate_rps)?)
}

/// Run every experiment the scenario names, in order.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<RunOutput, ScenarioError> {
    let mut out = RunOutput::default();
    for &exp in &cfg.experiments {
        match exp {
            Experiment::RaftLatency => {
                let lat = RaftCluster::no_load_latency(cfg.raft_config()).map_err(raft_err)?;
                let s = LatencyStats::from_samples(&[lat.as_nanos()], 0);
                out.rows.push(ResultRow::new(cfg, exp, 0, 1, 0, &s));
                out.dump.push(serde_json::json!({ "experiment": exp.label(), "latency_ns": lat.as_nanos() }));
            }
            Experiment::RaftLoad => {
                let rc = cfg.raft_config();
                let count = cfg.workload.count;
                // independent instances, merged back in load order
                let points = std::thread::scope(|s| {
                    let handles: Vec<_> = cfg
                        .workload
                        .loads_rps
                        .iter()
                        .map(|&l| {
                            let rc = rc.clone();
                            s.spawn(move || RaftCluster::measure_load(rc, l, count))
                        })
                        .collect();
                    handles.into_iter().map(|h| h.join().expect("load point thread")).collect::<Vec<_>>()
                });
                for p in points {
                    let p = p.map_err(raft_err)?;
                    out.rows.push(ResultRow::new(cfg, exp, p.load_rps, p.count, p.drops, &p.latency));
                    let mut v = serde_json::to_value(&p).expect("load point serializes");
                    v["experiment"] = exp.label().into();
                    out.dump.push(v);
                }
            }
            Experiment::Classify => {
                let rules = match load_rules(cfg)? {
                    Some(r) => r,
                    None => generate_rules(cfg.workload.rule_profile, cfg.workload.rules, cfg.seed),
                };
                let keys: Vec<ClassKey> = if cfg.trace.is_some() {
                    load_reports(cfg)?.iter().map(ClassKey::from_report).collect()
                } else {
                    generate_keys(&rules, cfg.workload.keys, cfg.seed)
                };
                let b = bench_classify(&rules, &keys, cfg.workload.engine);
                out.rows.push(ResultRow::new(cfg, exp, 0, b.keys as u64, b.mismatches, &LatencyStats::default()));
                out.dump.push(serde_json::json!({
                    "experiment": exp.label(),
                    "engine": b.engine,
                    "rules": b.rules,
                    "keys": b.keys,
                    "matched": b.matched,
                    "mismatches": b.mismatches,
                }));
                if b.mismatches > 0 {
                    return Err(ScenarioError::Assertion(format!(
                        "{:?} engine disagrees with the linear scan on {} of {} keys",
                        b.engine, b.mismatches, b.keys
                    )));
                }
            }
            Experiment::Monitor => {
                let reports = load_reports(cfg)?;
                let run = plane_run(cfg, false, &reports)?;
                let s = run.stage(STAGE_MONITOR);
                out.rows.push(ResultRow::new(cfg, exp, cfg.workload.report_rate_rps, run.monitor_processed, run.total_drops(), &s));
                dump_traces(&mut out, exp, &run);
                if let Some(want) = cfg.workload.expect_commands {
                    if run.commands != want {
                        return Err(ScenarioError::Assertion(format!("expected {want} commands, got {}", run.commands)));
                    }
                }
                if let Some(sc) = load_sidecar(cfg)? {
                    let got: Vec<_> = run.traces.iter().map(|t| (t.report_id as usize, t.flow, t.target)).collect();
                    let want: Vec<_> =
                        sc.expected_commands.iter().map(|c| (c.report_index, Some(c.flow), c.at_switch)).collect();
                    if got != want {
                        return Err(ScenarioError::Assertion(format!("commands {got:?} differ from ground truth {want:?}")));
                    }
                }
            }
            Experiment::Direct => {
                let reports = load_reports(cfg)?;
                let run = plane_run(cfg, true, &reports)?;
                if run.traces.is_empty() {
                    return Err(PlaneError::NoCommand.into());
                }
                let s = run.stage(STAGE_DIRECT);
                out.rows.push(ResultRow::new(cfg, exp, cfg.workload.report_rate_rps, s.count, run.total_drops(), &s));
                dump_traces(&mut out, exp, &run);
            }
            Experiment::E2e => {
                let reports = load_reports(cfg)?;
                let run = plane_run(cfg, false, &reports)?;
                let s = run.stage(STAGE_E2E);
                if s.count == 0 {
                    return Err(PlaneError::NoCommand.into());
                }
                out.rows.push(ResultRow::new(cfg, exp, cfg.workload.report_rate_rps, s.count, run.total_drops(), &s));
                dump_traces(&mut out, exp, &run);
                if let Some(max) = cfg.workload.max_e2e_ns {
                    if s.max_ns > max {
                        return Err(ScenarioError::Assertion(format!("e2e latency {} ns exceeds {max} ns", s.max_ns)));
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<(), ScenarioError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| ScenarioError::Output { path: path.to_path_buf(), source: e.into() };
    if rows.is_empty() {
        w.write_record(RESULT_HEADER.split(',')).map_err(io)?;
    }
    for r in rows {
        w.serialize(r).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| ScenarioError::Output { path: path.to_path_buf(), source: e.into_error() })?;
    write_atomic(path, &bytes)
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>, ScenarioError> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| ScenarioError::Input { path: path.to_path_buf(), source: e.into() })?;
    r.deserialize()
        .collect::<Result<Vec<ResultRow>, _>>()
        .map_err(|e| ScenarioError::config(path.display().to_string(), e))
}

pub fn summary_table(rows: &[ResultRow]) -> String {
    let mut s = format!(
        "{:<16} {:<13} {:>10} {:>7} {:>6} {:>10} {:>9} {:>9} {:>9}\n",
        "scenario", "experiment", "load_rps", "count", "drops", "mean_ns", "p50_ns", "p99_ns", "max_ns"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<16} {:<13} {:>10} {:>7} {:>6} {:>10.1} {:>9} {:>9} {:>9}",
            r.scenario, r.experiment, r.load_rps, r.count, r.drops, r.mean_ns, r.p50_ns, r.p99_ns, r.max_ns
        );
    }
    s
}
