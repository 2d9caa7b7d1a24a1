use std::path::Path;
use std::process::{Command, Output};

fn semcache(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_semcache")).args(args).output().expect("binary runs");
    assert!(
        out.status.success(),
        "semcache {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn field<'a>(text: &'a str, key: &str) -> Vec<&'a str> {
    text.lines()
        .filter_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .collect()
}

#[test]
fn generate_replay_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("zipf");
    let w = w.to_str().unwrap();
    semcache(&["gen-zipf", "--clusters", "4", "--events", "200", "--seed", "3", "--out", w]);
    assert!(Path::new(w).join("trace.tsv").exists() && Path::new(w).join("table.tsv").exists());

    let reports = dir.path().join("r.kv");
    let out = semcache(&[
        "replay",
        "--workload",
        w,
        "--mode",
        "all",
        "--cache-ratio",
        "0.5",
        "--out",
        reports.to_str().unwrap(),
    ]);
    let text = stdout(&out);
    assert_eq!(field(&text, "mode"), vec!["vanilla", "exact", "ann_only", "full"]);
    let hit_rates: Vec<f64> = field(&text, "hit_rate").iter().map(|v| v.parse().unwrap()).collect();
    assert_eq!(hit_rates[0], 0.0);
    assert!(hit_rates[3] > hit_rates[1]);

    let table = stdout(&semcache(&["report", reports.to_str().unwrap()]));
    assert_eq!(table.lines().count(), 5);
    assert!(table.starts_with("mode\t"));
}

#[test]
fn replay_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("trend");
    let w = w.to_str().unwrap();
    semcache(&["gen-trend", "--topic", "60:40", "--topic", "200:30", "--duration-s", "300", "--out", w]);
    let a = stdout(&semcache(&["replay", "--workload", w, "--seed", "5"]));
    let b = stdout(&semcache(&["replay", "--workload", w, "--seed", "5"]));
    assert_eq!(a, b);
}

#[test]
fn other_generators_write_workloads() {
    let dir = tempfile::tempdir().unwrap();
    for (cmd, name) in [("gen-repo", "repo"), ("gen-mixed", "mixed")] {
        let w = dir.path().join(name);
        let out = stdout(&semcache(&[cmd, "--out", w.to_str().unwrap()]));
        assert!(out.starts_with("wrote "), "{out}");
    }
    let out = stdout(&semcache(&[
        "replay",
        "--workload",
        dir.path().join("mixed").to_str().unwrap(),
        "--mixed-endpoints",
        "--cache-ratio",
        "0.05",
        "--policy",
        "lru",
    ]));
    assert_eq!(field(&out, "requests"), vec!["1000"]);
}

#[test]
fn sim_reports_priority_safety() {
    let dir = tempfile::tempdir().unwrap();
    let tasks = dir.path().join("tasks.tsv");
    let out = stdout(&semcache(&["sim", "--duration", "500", "--write-tasks", tasks.to_str().unwrap()]));
    assert_eq!(field(&out, "priority_safe"), vec!["true"]);
    let again = stdout(&semcache(&["sim", "--tasks", tasks.to_str().unwrap()]));
    assert_eq!(out, again);
}

#[test]
fn bad_input_fails_cleanly() {
    let out = Command::new(env!("CARGO_BIN_EXE_semcache"))
        .args(["replay", "--workload", "/nonexistent/workload"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("loading"));
}
