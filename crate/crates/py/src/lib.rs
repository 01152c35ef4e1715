use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use reflex_core::classifier::synth::{generate_keys, generate_rules, RuleProfile};
use reflex_core::classifier::{classify_linear, parse_ruleset, ClassKey, ClassifierEngine, EngineConfig, Schema};
use reflex_core::monitors::monitor_budget as core_budget;
use reflex_core::raftstate::{RaftCluster, RaftClusterConfig, ServiceProfile};
use reflex_core::reflexplane::{self as rp, PlaneConfig, ReflexTrace, RunReport};
use reflex_core::scenario::{run_scenario as core_run, ScenarioConfig};
use reflex_core::simnet::LatencyStats;
use reflex_core::telemetry::{self, planted_stream, ElementId, Spike, StreamSpec};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn stats_dict<'py>(py: Python<'py>, s: &LatencyStats) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("count", s.count)?;
    d.set_item("drops", s.drop_count)?;
    d.set_item("mean_ns", s.mean_ns)?;
    d.set_item("p50_ns", s.p50_ns)?;
    d.set_item("p99_ns", s.p99_ns)?;
    d.set_item("max_ns", s.max_ns)?;
    Ok(d)
}

fn trace_dict<'py>(py: Python<'py>, t: &ReflexTrace) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("command_id", t.command_id)?;
    d.set_item("report_id", t.report_id)?;
    d.set_item("monitor", t.monitor.as_str())?;
    d.set_item("kind", &t.kind)?;
    d.set_item("flow", t.flow.map(|f| f.to_string()))?;
    d.set_item("target", t.target.0)?;
    d.set_item("report_ingress", t.report_ingress.as_nanos())?;
    d.set_item("monitor_decision", t.monitor_decision.as_nanos())?;
    d.set_item("raft_commit", t.raft_commit.map(|v| v.as_nanos()))?;
    d.set_item("switch_arrival", t.switch_arrival.map(|v| v.as_nanos()))?;
    d.set_item("e2e_ns", t.e2e().map(|v| v.as_nanos()))?;
    Ok(d)
}

fn run_dict<'py>(py: Python<'py>, r: &RunReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("reports_in", r.reports_in)?;
    d.set_item("classified", r.classified)?;
    d.set_item("monitor_processed", r.monitor_processed)?;
    d.set_item("commands", r.commands)?;
    d.set_item("switch_updates", r.switch_updates)?;
    d.set_item("drops", r.total_drops())?;
    d.set_item("throughput_rps", r.throughput_rps)?;
    let stages = PyDict::new(py);
    for (k, s) in &r.stages {
        stages.set_item(k, stats_dict(py, s)?)?;
    }
    d.set_item("stages", stages)?;
    let traces = r.traces.iter().map(|t| trace_dict(py, t)).collect::<PyResult<Vec<_>>>()?;
    d.set_item("traces", traces)?;
    Ok(d)
}

/// Reports per second a link produces when every packet carries a report.
#[pyfunction]
fn report_rate_for_link(line_rate_bits_per_s: u64, pkt_size_bytes: u32) -> PyResult<u64> {
    telemetry::report_rate_for_link(line_rate_bits_per_s, pkt_size_bytes).map_err(value_err)
}

/// Returns `(cycles, ns)` available per report.
#[pyfunction]
fn monitor_budget(reports_per_s: u64, core_hz: u64) -> PyResult<(u64, u64)> {
    let b = core_budget(reports_per_s, core_hz).map_err(value_err)?;
    Ok((b.cycles, b.ns))
}

fn raft_cfg(switch_latency_ns: u64, link_latency_ns: u64, zero_service: bool) -> RaftClusterConfig {
    RaftClusterConfig {
        switch_latency_ns,
        link_latency_ns,
        service: if zero_service { ServiceProfile::zero() } else { ServiceProfile::calibrated() },
        ..Default::default()
    }
}

/// Latency of one replicated write on an idle 3-replica cluster, in ns.
#[pyfunction]
#[pyo3(signature = (switch_latency_ns=1, link_latency_ns=43, zero_service=false))]
fn raft_write_latency(switch_latency_ns: u64, link_latency_ns: u64, zero_service: bool) -> PyResult<u64> {
    let cfg = raft_cfg(switch_latency_ns, link_latency_ns, zero_service);
    RaftCluster::no_load_latency(cfg).map(|v| v.as_nanos()).map_err(runtime_err)
}

#[pyfunction]
#[pyo3(signature = (load_rps, count=10_000, switch_latency_ns=1, seed=1))]
fn raft_load_point(py: Python<'_>, load_rps: u64, count: u64, switch_latency_ns: u64, seed: u64) -> PyResult<Py<PyDict>> {
    let cfg = RaftClusterConfig { seed, ..raft_cfg(switch_latency_ns, 43, false) };
    let p = py.detach(|| RaftCluster::measure_load(cfg, load_rps, count)).map_err(runtime_err)?;
    let d = stats_dict(py, &p.latency)?;
    d.set_item("load_rps", p.load_rps)?;
    d.set_item("completed", p.completed)?;
    d.set_item("drops", p.drops)?;
    d.set_item("throughput_rps", p.throughput_rps)?;
    Ok(d.unbind())
}

/// Run a scenario file; returns its result rows as dicts.
#[pyfunction]
#[pyo3(signature = (path, overrides=Vec::new()))]
fn run_scenario(py: Python<'_>, path: PathBuf, overrides: Vec<String>) -> PyResult<Vec<Py<PyDict>>> {
    let cfg = ScenarioConfig::load(&path, &overrides).map_err(value_err)?;
    let out = py.detach(|| core_run(&cfg)).map_err(runtime_err)?;
    out.rows
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("scenario", &r.scenario)?;
            d.set_item("experiment", &r.experiment)?;
            d.set_item("load_rps", r.load_rps)?;
            d.set_item("count", r.count)?;
            d.set_item("drops", r.drops)?;
            d.set_item("mean_ns", r.mean_ns)?;
            d.set_item("p50_ns", r.p50_ns)?;
            d.set_item("p99_ns", r.p99_ns)?;
            d.set_item("max_ns", r.max_ns)?;
            Ok(d.unbind())
        })
        .collect()
}

/// Prioritized rule set with an accelerated engine built over it.
#[pyclass(name = "RuleSet", frozen)]
struct PyRuleSet {
    rules: reflex_core::classifier::RuleSet,
    engine: ClassifierEngine,
}

#[pymethods]
impl PyRuleSet {
    /// Parse rule-file text.
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        let rules = parse_ruleset(text, &Schema::reflex()).map_err(value_err)?;
        let engine = ClassifierEngine::build(&rules, EngineConfig::default());
        Ok(PyRuleSet { rules, engine })
    }

    #[staticmethod]
    #[pyo3(signature = (n, profile="acl", seed=1))]
    fn synthetic(n: usize, profile: &str, seed: u64) -> PyResult<Self> {
        let profile: RuleProfile = profile.parse().map_err(PyValueError::new_err)?;
        let rules = generate_rules(profile, n, seed);
        let engine = ClassifierEngine::build(&rules, EngineConfig::default());
        Ok(PyRuleSet { rules, engine })
    }

    fn __len__(&self) -> usize {
        self.rules.len()
    }

    /// Id of the winning rule for a key of 9 field values, or None.
    fn classify(&self, values: Vec<u32>) -> PyResult<Option<u32>> {
        Ok(self.engine.classify_values(&values).map_err(value_err)?.map(|r| r.rule_id))
    }

    /// Same as `classify` by linear scan.
    fn classify_linear(&self, values: Vec<u32>) -> PyResult<Option<u32>> {
        let key = ClassKey::from_slice(&values).map_err(value_err)?;
        Ok(classify_linear(&self.rules, &key).map(|r| r.rule_id))
    }

    /// Synthetic keys shaped by the rules, as lists of field values.
    #[pyo3(signature = (n, seed=1))]
    fn sample_keys(&self, n: usize, seed: u64) -> Vec<Vec<u32>> {
        generate_keys(&self.rules, n, seed).into_iter().map(|k| k.0.to_vec()).collect()
    }

    /// Keys on which the engine and the linear scan disagree.
    fn mismatches(&self, py: Python<'_>, keys: Vec<Vec<u32>>) -> PyResult<u64> {
        let keys = keys.iter().map(|k| ClassKey::from_slice(k)).collect::<Result<Vec<_>, _>>().map_err(value_err)?;
        Ok(py.detach(|| {
            keys.iter()
                .filter(|k| self.engine.classify(k).map(|r| r.rule_id) != classify_linear(&self.rules, k).map(|r| r.rule_id))
                .count() as u64
        }))
    }
}

/// A simulated reflex plane. Not thread-safe; use from one thread.
#[pyclass(name = "Plane", unsendable)]
struct PyPlane {
    inner: rp::Plane,
}

#[pymethods]
impl PyPlane {
    #[new]
    #[pyo3(signature = (preset="nanopu", direct_reflex=false, monitor_service_ns=None, mac_serial_ns=None, seed=1))]
    fn new(
        preset: &str,
        direct_reflex: bool,
        monitor_service_ns: Option<u64>,
        mac_serial_ns: Option<u64>,
        seed: u64,
    ) -> PyResult<Self> {
        let mut cfg = PlaneConfig::preset(preset).map_err(value_err)?;
        cfg.direct_reflex = direct_reflex;
        cfg.seed = seed;
        if let Some(v) = monitor_service_ns {
            cfg.monitor_service_ns = v;
        }
        if let Some(v) = mac_serial_ns {
            cfg.mac_serial_ns = v;
        }
        let inner = rp::Plane::build(cfg, None).map_err(value_err)?;
        Ok(PyPlane { inner })
    }

    /// Elect a leader and let its heartbeat round pass. Returns the leader id.
    fn quiesce(&mut self) -> PyResult<usize> {
        self.inner.quiesce().map(|m| m as usize).map_err(runtime_err)
    }

    fn now_ns(&self) -> u64 {
        self.inner.now().as_nanos()
    }

    /// Generate a synthetic stream with latency spikes planted at
    /// `(flow, report, hop, extra_ns)` and push it through the plane.
    #[pyo3(signature = (flows=4, reports_per_flow=20, spikes=Vec::new(), rate_rps=10_000_000, seed=1))]
    fn inject_planted(
        &mut self,
        py: Python<'_>,
        flows: u32,
        reports_per_flow: u32,
        spikes: Vec<(u32, u32, usize, u64)>,
        rate_rps: u64,
        seed: u64,
    ) -> PyResult<Py<PyDict>> {
        let spec = StreamSpec {
            flows,
            reports_per_flow,
            spikes: spikes.into_iter().map(|(flow, report, hop, extra_ns)| Spike { flow, report, hop, extra_ns }).collect(),
            seed,
            ..Default::default()
        };
        let trace = planted_stream(&spec).map_err(value_err)?;
        let run = self.inner.inject_reports(&trace.reports, rate_rps).map_err(runtime_err)?;
        Ok(run_dict(py, &run)?.unbind())
    }

    /// Replay an INT trace in the text format.
    #[pyo3(signature = (text, rate_rps=10_000_000))]
    fn inject_trace(&mut self, py: Python<'_>, text: &str, rate_rps: u64) -> PyResult<Py<PyDict>> {
        let reports = telemetry::parse_trace(text).map_err(value_err)?;
        let run = self.inner.inject_reports(&reports, rate_rps).map_err(runtime_err)?;
        Ok(run_dict(py, &run)?.unbind())
    }

    /// Forwarding entries the leader holds for one switch, as `{flow: port}`.
    fn forwarding(&self, py: Python<'_>, element: u32) -> PyResult<Py<PyDict>> {
        let st = self.inner.read_element_state(ElementId(element)).map_err(runtime_err)?;
        let d = PyDict::new(py);
        for (flow, port) in &st.forwarding_table {
            d.set_item(flow.to_string(), port)?;
        }
        Ok(d.unbind())
    }

    fn drops(&self, node: &str) -> PyResult<u64> {
        self.inner.drops(node).map_err(value_err)
    }
}

#[pymodule]
fn reflex(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(report_rate_for_link, m)?)?;
    m.add_function(wrap_pyfunction!(monitor_budget, m)?)?;
    m.add_function(wrap_pyfunction!(raft_write_latency, m)?)?;
    m.add_function(wrap_pyfunction!(raft_load_point, m)?)?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    m.add_class::<PyRuleSet>()?;
    m.add_class::<PyPlane>()?;
    Ok(())
}
