//! Scenario files, experiment runner and result CSVs.
//!
//! Scenarios are TOML. Unknown keys are rejected and every error names the
//! offending key path (or line for syntax errors).

mod fixtures;
mod run;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::synth::RuleProfile;
use crate::classifier::ClassifierError;
use crate::monitors::MonitorSpec;
use crate::raftstate::RaftClusterConfig;
use crate::reflexplane::{ClassifierStage, NetworkConfig, PlaneConfig, PlaneError, RaftStage};
use crate::telemetry::{StreamSpec, TelemetryError};

pub use fixtures::{
    detector_commands, expected_commands, seed_fixtures, ExpectedCommand, Sidecar, FIXTURE_RULES, FIXTURE_SIDECAR,
    FIXTURE_TRACE,
};
pub use run::{
    bench_classify, read_results, run_scenario, summary_table, write_results, ClassifyBench, ResultRow, RunOutput,
    RESULT_CSV_VERSION, RESULT_HEADER,
};

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("{path}: {msg}")]
    Config { path: String, msg: String },
    #[error("cannot read {path}: {source}")]
    Input { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Rules { path: PathBuf, source: ClassifierError },
    #[error("{path}: {source}")]
    Trace { path: PathBuf, source: TelemetryError },
    #[error("cannot write {path}: {source}")]
    Output { path: PathBuf, source: std::io::Error },
    #[error("assertion failed: {0}")]
    Assertion(String),
    #[error(transparent)]
    Plane(#[from] PlaneError),
}

impl ScenarioError {
    /// 2 for anything wrong with the inputs, 3 when a run breaks an assertion
    /// or the simulation itself fails, 1 for output IO.
    pub fn exit_code(&self) -> i32 {
        match self {
            ScenarioError::Config { .. }
            | ScenarioError::Input { .. }
            | ScenarioError::Rules { .. }
            | ScenarioError::Trace { .. } => 2,
            ScenarioError::Assertion(_) | ScenarioError::Plane(_) => 3,
            ScenarioError::Output { .. } => 1,
        }
    }

    fn config(path: impl Into<String>, msg: impl ToString) -> Self {
        ScenarioError::Config { path: path.into(), msg: msg.to_string() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    /// One write on an idle cluster.
    RaftLatency,
    /// One row per offered load in `workload.loads_rps`.
    RaftLoad,
    /// Accelerated engine against the linear scan.
    Classify,
    /// Reports through classifier and monitors.
    Monitor,
    /// Monitor-local reflex, no Raft.
    Direct,
    /// Report to switch through Raft.
    E2e,
}

impl Experiment {
    pub fn label(self) -> &'static str {
        match self {
            Experiment::RaftLatency => "raft_latency",
            Experiment::RaftLoad => "raft_load",
            Experiment::Classify => "classify",
            Experiment::Monitor => "monitor",
            Experiment::Direct => "direct",
            Experiment::E2e => "e2e",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineKind {
    Linear,
    Tree,
    #[default]
    Learned,
}

impl std::str::FromStr for EngineKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "linear" => Ok(EngineKind::Linear),
            "tree" => Ok(EngineKind::Tree),
            "learned" => Ok(EngineKind::Learned),
            _ => Err(format!("unknown engine `{s}` (linear, tree, learned)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Workload {
    pub loads_rps: Vec<u64>,
    /// Writes per load point.
    pub count: u64,
    /// Report injection rate for plane experiments.
    pub report_rate_rps: u64,
    /// Synthetic keys for the classify experiment when no trace is given.
    pub keys: usize,
    /// Synthetic rules when no rule file is given.
    pub rules: usize,
    pub rule_profile: RuleProfile,
    pub engine: EngineKind,
    /// Synthetic report stream when no trace is given.
    pub stream: StreamSpec,
    pub expect_commands: Option<u64>,
    pub max_e2e_ns: Option<u64>,
}

impl Default for Workload {
    fn default() -> Self {
        Workload {
            loads_rps: vec![318_000, 350_000, 400_000, 450_000, 507_000],
            count: 10_000,
            report_rate_rps: 10_000_000,
            keys: 10_000,
            rules: 100,
            rule_profile: RuleProfile::Acl,
            engine: EngineKind::Learned,
            stream: StreamSpec::default(),
            expect_commands: None,
            max_e2e_ns: None,
        }
    }
}

/// Knobs of the reflex plane not covered by `topology`, `classifier`, `monitors` and `raft`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlaneTuning {
    pub monitor_service_ns: u64,
    pub mac_serial_ns: u64,
    pub queue_capacity: usize,
    pub drain_ns: u64,
}

impl Default for PlaneTuning {
    fn default() -> Self {
        let p = PlaneConfig::nanopu();
        PlaneTuning {
            monitor_service_ns: p.monitor_service_ns,
            mac_serial_ns: p.mac_serial_ns,
            queue_capacity: p.queue_capacity,
            drain_ns: p.drain_ns,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub csv: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: PathBuf::from("out"), csv: "results.csv".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub scenario: String,
    /// Root of all randomness in the run.
    pub seed: u64,
    pub experiments: Vec<Experiment>,
    /// Rule file; relative paths resolve against the scenario file.
    pub ruleset: Option<PathBuf>,
    /// INT trace file.
    pub trace: Option<PathBuf>,
    /// Ground truth for `trace`; the monitor experiment checks against it.
    pub sidecar: Option<PathBuf>,
    pub topology: NetworkConfig,
    pub classifier: ClassifierStage,
    pub monitors: Vec<MonitorSpec>,
    pub plane: PlaneTuning,
    pub raft: RaftClusterConfig,
    pub workload: Workload,
    pub output: OutputConfig,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let p = PlaneConfig::nanopu();
        ScenarioConfig {
            scenario: "default".into(),
            seed: 1,
            experiments: vec![Experiment::RaftLatency],
            ruleset: None,
            trace: None,
            sidecar: None,
            topology: p.network,
            classifier: p.classifier,
            monitors: p.monitors,
            plane: PlaneTuning::default(),
            raft: RaftClusterConfig::default(),
            workload: Workload::default(),
            output: OutputConfig::default(),
            base_dir: PathBuf::new(),
        }
    }
}

impl ScenarioConfig {
    /// Parse TOML text with `key=value` overrides applied on top.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self, ScenarioError> {
        let doc: toml::Table = text.parse().map_err(|e: toml::de::Error| ScenarioError::config("<toml>", e))?;
        let mut doc = toml::Value::Table(doc);
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: ScenarioConfig = serde_path_to_error::deserialize(doc).map_err(|e| {
            let path = e.path().to_string();
            ScenarioError::config(path, e.into_inner())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ScenarioError> {
        let text = fs::read_to_string(path).map_err(|source| ScenarioError::Input { path: path.to_path_buf(), source })?;
        let mut cfg = Self::parse(&text, overrides).map_err(|e| match e {
            ScenarioError::Config { path: key, msg } => {
                ScenarioError::Config { path: format!("{}: {key}", path.display()), msg }
            }
            e => e,
        })?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.experiments.is_empty() {
            return Err(ScenarioError::config("experiments", "at least one experiment is required"));
        }
        if self.experiments.contains(&Experiment::RaftLoad) {
            if self.workload.loads_rps.is_empty() {
                return Err(ScenarioError::config("workload.loads_rps", "empty load list"));
            }
            if let Some(i) = self.workload.loads_rps.iter().position(|&l| l == 0) {
                return Err(ScenarioError::config(format!("workload.loads_rps[{i}]"), "load must be positive"));
            }
        }
        if self.workload.count == 0 {
            return Err(ScenarioError::config("workload.count", "must be positive"));
        }
        if self.workload.report_rate_rps == 0 {
            return Err(ScenarioError::config("workload.report_rate_rps", "must be positive"));
        }
        if self.output.csv.is_empty() {
            return Err(ScenarioError::config("output.csv", "empty file name"));
        }
        self.raft_config().validate().map_err(|e| ScenarioError::config("raft", e))?;
        self.plane_config(false).validate().map_err(|e| ScenarioError::config("plane", e))?;
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn raft_config(&self) -> RaftClusterConfig {
        RaftClusterConfig { seed: self.seed, ..self.raft.clone() }
    }

    pub fn plane_config(&self, direct_reflex: bool) -> PlaneConfig {
        let r = &self.raft;
        PlaneConfig {
            network: self.topology.clone(),
            classifier: self.classifier.clone(),
            monitors: self.monitors.clone(),
            monitor_service_ns: self.plane.monitor_service_ns,
            raft: RaftStage {
                replicas: r.replicas,
                service: r.service,
                timing: r.raft,
                preferred_leader: r.preferred_leader,
                mac_serial_ns: r.mac_serial_ns,
                retry_timeout_ns: r.retry_timeout_ns,
            },
            mac_serial_ns: self.plane.mac_serial_ns,
            queue_capacity: self.plane.queue_capacity,
            direct_reflex,
            drain_ns: self.plane.drain_ns,
            seed: self.seed,
        }
    }
}

/// Parse the right-hand side of `--set`: any TOML value, else a bare string.
fn override_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key v"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn apply_override(doc: &mut toml::Value, spec: &str) -> Result<(), ScenarioError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| ScenarioError::config(spec, "override must look like key=value"))?;
    let key = key.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ScenarioError::config(key, "empty path segment"));
    }
    let value = override_value(raw.trim());
    let mut cur = doc;
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        cur = match cur {
            toml::Value::Table(t) => {
                if last {
                    t.insert(part.to_string(), value);
                    return Ok(());
                }
                t.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()))
            }
            toml::Value::Array(a) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| ScenarioError::config(key, format!("`{part}` is not an array index")))?;
                let len = a.len();
                let slot = a
                    .get_mut(idx)
                    .ok_or_else(|| ScenarioError::config(key, format!("index {idx} out of range (len {len})")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(ScenarioError::config(key, format!("`{part}` is below a non-table value"))),
        };
    }
    Ok(())
}

/// Write `bytes` to `path` via a sibling temp file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ScenarioError> {
    let out = |source| ScenarioError::Output { path: path.to_path_buf(), source };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(out)?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or_default()
    ));
    let mut f = fs::File::create(&tmp).map_err(out)?;
    f.write_all(bytes).map_err(out)?;
    f.sync_all().map_err(out)?;
    fs::rename(&tmp, path).map_err(out)
}
