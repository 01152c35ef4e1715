use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use reflex_core::classifier::synth::{generate_keys, generate_rules, RuleProfile};
use reflex_core::classifier::{parse_ruleset, ClassKey, Schema};
use reflex_core::scenario::{
    bench_classify, run_scenario, seed_fixtures, summary_table, write_atomic, write_results, EngineKind, RunOutput,
    ScenarioConfig, ScenarioError,
};
use reflex_core::telemetry::parse_trace;

#[derive(Parser)]
#[command(name = "reflex", version, about = "Run reflex plane simulations and write CSV results")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Root seed; overrides the scenario's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override a scenario key, e.g. `raft.switch_latency_ns=1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Output directory; overrides `output.dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Write commit traces and load points as JSON lines to this file.
    #[arg(long, global = true)]
    trace_dump: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the experiments named in a scenario file.
    Run { config: PathBuf },
    /// Classify a trace or synthetic keys and check against the linear scan.
    BenchClassify {
        /// Rule file; synthetic rules when absent.
        #[arg(long)]
        rules: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        rule_count: usize,
        #[arg(long, default_value = "acl")]
        profile: RuleProfile,
        /// INT trace; synthetic keys when absent.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, default_value_t = 10_000)]
        keys: usize,
        #[arg(long, default_value = "learned")]
        engine: EngineKind,
    },
    /// Idle latency and a load sweep on the Raft cluster.
    BenchRaft {
        /// Comma-separated offered loads in requests per second.
        #[arg(long, value_delimiter = ',', default_values_t = [318_000u64, 350_000, 400_000, 450_000, 507_000])]
        loads: Vec<u64>,
        #[arg(long, default_value_t = 10_000)]
        count: u64,
    },
    /// Push a trace through classifier and monitors.
    BenchMonitor {
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Ground-truth sidecar to check the commands against.
        #[arg(long)]
        sidecar: Option<PathBuf>,
        #[arg(long, default_value_t = 10_000_000)]
        rate: u64,
    },
    /// Write the generated rule set, anomaly trace, sidecar and default scenarios.
    Fixtures,
}

fn toml_str(p: &Path) -> String {
    format!("{:?}", p.display().to_string())
}

fn finish(cfg: &ScenarioConfig, common: &Common, out: RunOutput) -> Result<()> {
    let dir = common.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
    let csv = dir.join(&cfg.output.csv);
    write_results(&csv, &out.rows)?;
    if let Some(p) = &common.trace_dump {
        let mut text = String::new();
        for v in &out.dump {
            text.push_str(&serde_json::to_string(v)?);
            text.push('\n');
        }
        write_atomic(p, text.as_bytes())?;
    }
    print!("{}", summary_table(&out.rows));
    println!("wrote {}", csv.display());
    Ok(())
}

fn scenario(text: &str, common: &Common) -> Result<ScenarioConfig, ScenarioError> {
    let mut sets = common.set.clone();
    if let Some(s) = common.seed {
        sets.push(format!("seed={s}"));
    }
    ScenarioConfig::parse(text, &sets)
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    match cli.cmd {
        Cmd::Run { config } => {
            let mut sets = common.set.clone();
            if let Some(s) = common.seed {
                sets.push(format!("seed={s}"));
            }
            let cfg = ScenarioConfig::load(&config, &sets)?;
            let out = run_scenario(&cfg)?;
            finish(&cfg, common, out)
        }
        Cmd::BenchRaft { loads, count } => {
            let loads: Vec<String> = loads.iter().map(u64::to_string).collect();
            let text = format!(
                "scenario = \"bench_raft\"\nexperiments = [\"raft_latency\", \"raft_load\"]\n\
                 [workload]\nloads_rps = [{}]\ncount = {count}\n[output]\ncsv = \"bench_raft.csv\"\n",
                loads.join(", ")
            );
            let cfg = scenario(&text, common)?;
            let out = run_scenario(&cfg)?;
            finish(&cfg, common, out)
        }
        Cmd::BenchMonitor { trace, sidecar, rate } => {
            let mut text = String::from("scenario = \"bench_monitor\"\nexperiments = [\"monitor\"]\n");
            if let Some(t) = &trace {
                text.push_str(&format!("trace = {}\n", toml_str(t)));
            }
            if let Some(s) = &sidecar {
                text.push_str(&format!("sidecar = {}\n", toml_str(s)));
            }
            text.push_str(&format!("[workload]\nreport_rate_rps = {rate}\n[output]\ncsv = \"bench_monitor.csv\"\n"));
            let cfg = scenario(&text, common)?;
            let out = run_scenario(&cfg)?;
            finish(&cfg, common, out)
        }
        Cmd::BenchClassify { rules, rule_count, profile, trace, keys, engine } => {
            let seed = common.seed.unwrap_or(1);
            let rs = match &rules {
                Some(p) => {
                    let text = std::fs::read_to_string(p).map_err(|source| ScenarioError::Input { path: p.clone(), source })?;
                    parse_ruleset(&text, &Schema::reflex()).map_err(|source| ScenarioError::Rules { path: p.clone(), source })?
                }
                None => generate_rules(profile, rule_count, seed),
            };
            let keys: Vec<ClassKey> = match &trace {
                Some(p) => {
                    let text = std::fs::read_to_string(p).map_err(|source| ScenarioError::Input { path: p.clone(), source })?;
                    let reports = parse_trace(&text).map_err(|source| ScenarioError::Trace { path: p.clone(), source })?;
                    reports.iter().map(ClassKey::from_report).collect()
                }
                None => generate_keys(&rs, keys, seed),
            };
            let b = bench_classify(&rs, &keys, engine);
            let mut csv = String::from("rule_id,count\n");
            for (rule, n) in &b.histogram {
                match rule {
                    Some(r) => csv.push_str(&format!("{r},{n}\n")),
                    None => csv.push_str(&format!("none,{n}\n")),
                }
            }
            let path = common.out.clone().unwrap_or_else(|| PathBuf::from("out")).join("classify_histogram.csv");
            write_atomic(&path, csv.as_bytes())?;
            println!(
                "engine={:?} rules={} keys={} matched={} mismatches={}",
                b.engine, b.rules, b.keys, b.matched, b.mismatches
            );
            println!("wrote {}", path.display());
            if b.mismatches > 0 {
                return Err(ScenarioError::Assertion(format!("{} mismatches against the linear scan", b.mismatches)).into());
            }
            Ok(())
        }
        Cmd::Fixtures => {
            if !common.set.is_empty() || common.trace_dump.is_some() {
                bail!("fixtures takes only --out and --seed");
            }
            let dir = common.out.clone().unwrap_or_else(|| PathBuf::from("fixtures"));
            let files = seed_fixtures(&dir, common.seed.unwrap_or(1)).context("writing fixtures")?;
            for f in files {
                println!("{}", f.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<ScenarioError>().map_or(1, ScenarioError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
