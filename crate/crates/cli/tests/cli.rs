// SPDX-License-Identifier: Apache-2.0

//! The `teeinfer` binary: exit codes, outputs and reports.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn teeinfer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_teeinfer")).args(args).output().unwrap()
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("micro");
    let o = teeinfer(&["simulate", "--config", s(&configs().join("micro_bench.toml")), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for v in ["native-one_to_one", "iso_reuse-one_to_one", "full_reuse-one_to_one"] {
        assert!(out.join(v).join("metrics.csv").is_file(), "{v}");
        assert!(out.join(v).join("summary.json").is_file(), "{v}");
    }

    let csv = dir.path().join("report.csv");
    let o = teeinfer(&["report", s(&out), "--csv", s(&csv)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.lines().next().unwrap().starts_with("variant"));
    assert_eq!(table.lines().count(), 4);
    let rows: Vec<String> = std::fs::read_to_string(&csv).unwrap().lines().map(str::to_owned).collect();
    assert_eq!(rows[0], "variant,requests,completed,rejected,mean_ms,p50_ms,p95_ms,p99_ms,max_ms,cold,warm,hot,model_switches,gb_s");
    let native = rows.iter().find(|r| r.starts_with("native-one_to_one,")).unwrap();
    let f: Vec<&str> = native.split(',').collect();
    // Every native request is cold.
    assert_eq!((f[9], f[10], f[11]), ("12", "0", "0"));
}

#[test]
fn seed_override_changes_stochastic_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("fnpacker_mixed.toml");
    let (a, b, c) = (dir.path().join("a.csv"), dir.path().join("b.csv"), dir.path().join("c.csv"));
    for (p, seed) in [(&a, "1"), (&b, "1"), (&c, "2")] {
        let o = teeinfer(&["gen-trace", "--config", s(&cfg), "--seed", seed, "--out", s(p)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let read = |p: &Path| std::fs::read(p).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
    assert!(String::from_utf8(read(&a)).unwrap().starts_with("t_ms,user_id,model_id,session,step,gap_ms\n"));
}

#[test]
fn invalid_config_exits_nonzero_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    let text = std::fs::read_to_string(configs().join("micro_bench.toml")).unwrap().replacen("seed = 7", "seed = 7\ncolour = \"blue\"", 1);
    std::fs::write(&bad, text).unwrap();
    let o = teeinfer(&["simulate", "--config", s(&bad), "--out", s(&dir.path().join("o"))]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("colour"), "{err}");
    assert!(!dir.path().join("o").exists());

    let o = teeinfer(&["simulate", "--config", s(&dir.path().join("missing.toml"))]);
    assert!(!o.status.success());
    let o = teeinfer(&["simulate", "--config", s(&configs().join("micro_bench.toml")), "--mode", "live"]);
    assert!(!o.status.success());
}

#[test]
fn empty_workload_costs_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(configs().join("micro_bench.toml")).unwrap();
    let head = &text[..text.find("[[workload]]").unwrap()];
    let cfg = dir.path().join("empty.toml");
    std::fs::write(&cfg, head).unwrap();
    let out = dir.path().join("o");
    let o = teeinfer(&["simulate", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("full_reuse-one_to_one/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["requests"], 0);
    assert_eq!(summary["gb_s"], 0.0);
    let csv = std::fs::read_to_string(out.join("full_reuse-one_to_one/metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1);
}

#[test]
fn measure_prints_both_measurements() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("live.toml");
    std::fs::write(&cfg, "platform_seed = 1\nkeyservice_url = \"http://127.0.0.1:7100\"\nmodel_dir = \"models\"\n[worker]\ntcs_count = 2\n").unwrap();
    let o = teeinfer(&["measure", "--config", s(&cfg)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("keyservice ") && lines[1].starts_with("worker "));
    assert_eq!(lines[1].split_whitespace().nth(1).unwrap().len(), 64);

    std::fs::write(&cfg, "platform_seed = 1\nkeyservice_url = \"x\"\nmodel_dir = \"m\"\n[worker]\ntcs = 2\n").unwrap();
    assert!(!teeinfer(&["measure", "--config", s(&cfg)]).status.success());
}
