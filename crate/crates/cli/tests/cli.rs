use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const HEADER: &str = "scenario,experiment,load_rps,count,drops,mean_ns,p50_ns,p99_ns,max_ns";

fn reflex(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reflex")).args(args).current_dir(cwd).output().expect("spawn reflex")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn fixtures(dir: &Path) {
    let o = reflex(&["fixtures", "--out", "fx"], dir);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn classify_scenario_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    fixtures(dir.path());
    let o = reflex(&["run", "fx/classify_acl.toml", "--out", "res"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("res/results.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(HEADER));
    assert_eq!(lines.next(), Some("classify_acl,classify,0,10000,0,0.0,0,0,0"));
    assert!(String::from_utf8_lossy(&o.stdout).contains("classify_acl"));
}

#[test]
fn switch_override_reaches_raft_rows() {
    let dir = tempfile::tempdir().unwrap();
    fixtures(dir.path());
    let run = |extra: &[&str]| {
        let mut args = vec!["run", "fx/raft_sweep.toml", "--out", "res", "--set", "experiments=[\"raft_latency\"]"];
        args.extend_from_slice(extra);
        let o = reflex(&args, dir.path());
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        fs::read_to_string(dir.path().join("res/results.csv")).unwrap()
    };
    assert!(run(&[]).contains("raft_sweep,raft_latency,0,1,0,3076.0,3076,3076,3076"));
    assert!(run(&["--set", "raft.switch_latency_ns=1"]).contains("raft_sweep,raft_latency,0,1,0,1880.0,1880,1880,1880"));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    fixtures(dir.path());

    let o = reflex(&["run", "fx/raft_sweep.toml", "--set", "raft.switch_latncy_ns=1"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("raft.switch_latncy_ns"), "{}", stderr(&o));

    let o = reflex(&["run", "missing.toml"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("missing.toml"));

    let o = reflex(&["run", "fx/classify_acl.toml", "--set", "ruleset=gone.rules"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("gone.rules"), "{}", stderr(&o));

    let o = reflex(&["frobnicate"], dir.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn failed_assertion_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    fixtures(dir.path());
    let o = reflex(&["run", "fx/monitor_anomaly.toml", "--set", "workload.expect_commands=2"], dir.path());
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("expected 2 commands"));
}

#[test]
fn trace_dump_is_json_lines() {
    let dir = tempfile::tempdir().unwrap();
    fixtures(dir.path());
    let o = reflex(&["run", "fx/reflex_e2e.toml", "--out", "res", "--trace-dump", "res/traces.jsonl"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let dump = fs::read_to_string(dir.path().join("res/traces.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = dump.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["experiment"], "direct");
    assert_eq!(lines[1]["experiment"], "e2e");
    assert!(lines[1]["switch_arrival"].is_u64());
}

#[test]
fn fixtures_repeat_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&reflex(&["fixtures", "--out", "a", "--seed", "5"], dir.path())), 0);
    assert_eq!(code(&reflex(&["fixtures", "--out", "b", "--seed", "5"], dir.path())), 0);
    let mut names: Vec<_> = fs::read_dir(dir.path().join("a")).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 7);
    for n in names {
        assert_eq!(fs::read(dir.path().join("a").join(&n)).unwrap(), fs::read(dir.path().join("b").join(&n)).unwrap());
    }

    fs::write(dir.path().join("blocker"), "").unwrap();
    let o = reflex(&["fixtures", "--out", "blocker/sub"], dir.path());
    assert_ne!(code(&o), 0);
}

#[test]
fn bench_classify_engines_agree() {
    let dir = tempfile::tempdir().unwrap();
    fixtures(dir.path());
    let mut hist = Vec::new();
    for engine in ["linear", "tree", "learned"] {
        let out = format!("res_{engine}");
        let o = reflex(&["bench-classify", "--rules", "fx/acl_100.rules", "--engine", engine, "--out", &out], dir.path());
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(String::from_utf8_lossy(&o.stdout).contains("mismatches=0"));
        hist.push(fs::read_to_string(dir.path().join(out).join("classify_histogram.csv")).unwrap());
    }
    assert_eq!(hist[0], hist[1]);
    assert_eq!(hist[0], hist[2]);

    let o = reflex(&["bench-classify", "--trace", "fx/trace_anomaly1.int", "--out", "t"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn bench_monitor_checks_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    fixtures(dir.path());
    let o = reflex(
        &["bench-monitor", "--trace", "fx/trace_anomaly1.int", "--sidecar", "fx/trace_anomaly1.json", "--out", "res"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("res/bench_monitor.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("bench_monitor,monitor,10000000,320,0,"), "{csv}");
}

#[test]
fn bench_raft_rows_per_load() {
    let dir = tempfile::tempdir().unwrap();
    let o = reflex(&["bench-raft", "--loads", "318000,400000", "--count", "2000", "--out", "res"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("res/bench_raft.csv")).unwrap();
    let loads: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').nth(2).unwrap()).collect();
    assert_eq!(loads, ["0", "318000", "400000"]);
}
