use std::path::Path;
use std::process::{Command, Output};

fn specpipe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_specpipe"))
        .args(args)
        .output()
        .unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen_kv(dir: &Path, name: &str) -> std::path::PathBuf {
    let out = dir.join(name);
    let o = specpipe(&[
        "gen",
        "kvswap",
        "--policy",
        "lifo",
        "--requests",
        "8",
        "--block-bytes",
        "65536",
        "-o",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn gen_offload_writes_cycle_trace() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cycle.jsonl");
    let o = specpipe(&[
        "gen",
        "offload",
        "--layers",
        "4",
        "--offload",
        "1,3,4",
        "--iters",
        "2",
        "-o",
        p(&out),
    ]);
    assert!(o.status.success());
    let t = specpipe::workload::Trace::load(&out).unwrap();
    let seq: Vec<u64> = t.swap_in_sequence().iter().map(|b| b.0).collect();
    assert_eq!(seq, vec![1, 3, 4, 1, 3, 4]);
}

#[test]
fn missing_flag_is_usage_error() {
    let o = specpipe(&["gen", "offload"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(
        specpipe(&["sim", "--trace", "x", "--sweep", "colour=1"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn bad_generator_parameters_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t.jsonl");
    let o = specpipe(&[
        "gen",
        "offload",
        "--layers",
        "2",
        "--offload",
        "5",
        "-o",
        p(&out),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sim_writes_one_row_per_system() {
    let dir = tempfile::tempdir().unwrap();
    let trace = gen_kv(dir.path(), "kv.jsonl");
    let o = specpipe(&[
        "sim",
        "--systems",
        "nocc,synccc,specpipe",
        "--trace",
        p(&trace),
    ]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("schema_version,config_hash,trace,system,workers,throughput"));
    assert!(lines[3].contains(",specpipe,"));
}

#[test]
fn worker_sweep_is_monotone() {
    let dir = tempfile::tempdir().unwrap();
    let trace = gen_kv(dir.path(), "kv.jsonl.gz");
    let csv_path = dir.path().join("m.csv");
    let o = specpipe(&[
        "sim",
        "--systems",
        "specpipe",
        "--trace",
        p(&trace),
        "--sweep",
        "workers=1..8",
        "-o",
        p(&csv_path),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut r = csv::Reader::from_path(&csv_path).unwrap();
    let headers = r.headers().unwrap().clone();
    let col = headers.iter().position(|h| h == "throughput").unwrap();
    let tp: Vec<f64> = r
        .records()
        .map(|rec| rec.unwrap()[col].parse().unwrap())
        .collect();
    assert_eq!(tp.len(), 8);
    assert!(tp.windows(2).all(|w| w[1] >= w[0]), "{tp:?}");
}

#[test]
fn event_log_and_stats_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let trace = gen_kv(dir.path(), "kv.jsonl");
    let (log, stats) = (dir.path().join("ev.jsonl"), dir.path().join("st.json"));
    let o = specpipe(&[
        "sim",
        "--systems",
        "specpipe",
        "--trace",
        p(&trace),
        "--event-log",
        p(&log),
        "--stats",
        p(&stats),
        "--format",
        "json",
    ]);
    assert!(o.status.success());
    let rows: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 1);
    let text = std::fs::read_to_string(&log).unwrap();
    assert!(text.lines().count() > 10);
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v.get("trace").is_some() || v.get("engine").is_some());
    }
    let s: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&stats).unwrap()).unwrap();
    assert!(s[0]["stats"]["h2d_requests"].as_u64().unwrap() > 0);
}

#[test]
fn unparsable_trace_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, "not json\n").unwrap();
    assert_eq!(
        specpipe(&["sim", "--trace", p(&bad)]).status.code(),
        Some(3)
    );
    assert_eq!(
        specpipe(&["sim", "--trace", p(&dir.path().join("missing.jsonl"))])
            .status
            .code(),
        Some(3)
    );
}

#[test]
fn verify_runs_all_scenarios() {
    let o = specpipe(&["verify"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.contains("PASS")).count(), 6);
}

#[test]
#[cfg(feature = "fault-injection")]
fn verify_single_scenario_with_corruption() {
    let o = specpipe(&["verify", "--scenario", "replay", "--inject-corruption"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(text.contains("PASS") && text.contains("authentication failed"));
    assert_eq!(
        specpipe(&["verify", "--scenario", "nope"]).status.code(),
        Some(2)
    );
}
