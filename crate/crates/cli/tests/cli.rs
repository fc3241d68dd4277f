use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn mlopf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mlopf"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: PathBuf) -> Value {
    serde_json::from_str(&fs::read_to_string(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display())))
        .unwrap()
}

/// Generated feeder directory with network, devices and partition files.
fn generated(tmp: &TempDir, extra: &[&str]) -> PathBuf {
    let dir = tmp.path().join("feeder");
    let mut args = vec!["gen", "--out", path(&dir)];
    args.extend_from_slice(extra);
    let out = mlopf(&args);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    dir
}

fn solve(feeder: &Path, out: &Path, extra: &[&str]) -> Output {
    let net = feeder.join("network.json");
    let dev = feeder.join("devices.json");
    let part = feeder.join("partition.json");
    let mut args = vec![
        "solve",
        "--network",
        path(&net),
        "--devices",
        path(&dev),
        "--partition",
        path(&part),
        "--out",
        path(out),
    ];
    args.extend_from_slice(extra);
    mlopf(&args)
}

const REGULATION: [&str; 6] = [
    "--step-primal",
    "0.05",
    "--step-dual",
    "2e-3",
    "--eta",
    "1e-2",
];

#[test]
fn gen_writes_documents_that_validate() {
    let tmp = TempDir::new().unwrap();
    let feeder = generated(&tmp, &["--buses", "40", "--seed", "4"]);
    for f in [
        "network.json",
        "devices.json",
        "partition.json",
        "manifest.json",
        "feeder_spec.json",
    ] {
        assert!(feeder.join(f).exists(), "{f} missing");
    }
    let out = mlopf(&[
        "validate",
        "--network",
        path(&feeder.join("network.json")),
        "--devices",
        path(&feeder.join("devices.json")),
        "--partition",
        path(&feeder.join("partition.json")),
    ]);
    assert!(out.status.success());
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["network"]["buses"], 40);
    assert_eq!(report["partition"]["valid"], true);
}

#[test]
fn gen_is_deterministic_per_seed() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let fa = generated(&a, &["--buses", "50", "--seed", "9"]);
    let fb = generated(&b, &["--buses", "50", "--seed", "9"]);
    for f in ["network.json", "devices.json", "partition.json"] {
        assert_eq!(fs::read(fa.join(f)).unwrap(), fs::read(fb.join(f)).unwrap());
    }
}

#[test]
fn malformed_network_exits_with_validation_record() {
    let tmp = TempDir::new().unwrap();
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"buses": [{"id": 0, "phases": ["a"], "parent": null}, {"id": 1, "phases": ["b"], "parent": 0}], "lines": []}"#).unwrap();
    let out = mlopf(&[
        "solve",
        "--network",
        path(&bad),
        "--devices",
        path(&bad),
        "--out",
        path(&tmp.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let line = String::from_utf8_lossy(&out.stderr);
    let record: Value = serde_json::from_str(line.trim()).unwrap();
    assert_eq!(record["error"]["kind"], "validation");
}

#[test]
fn missing_input_file_is_a_validation_error() {
    let tmp = TempDir::new().unwrap();
    let out = mlopf(&["validate", "--network", path(&tmp.path().join("nope.json"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_partition_document_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let feeder = generated(&tmp, &["--buses", "30"]);
    let part = tmp.path().join("part.json");
    fs::write(&part, r#"{"areas": [{"root": 0, "subareas": []}]}"#).unwrap();
    let out = mlopf(&[
        "validate",
        "--network",
        path(&feeder.join("network.json")),
        "--partition",
        path(&part),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn solve_with_zero_iterations_keeps_initial_state() {
    let tmp = TempDir::new().unwrap();
    let feeder = generated(&tmp, &["--buses", "300", "--heavy"]);
    let out_dir = tmp.path().join("run");
    let out = solve(&feeder, &out_dir, &["--iters", "0"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let trace = fs::read_to_string(out_dir.join("trace.csv")).unwrap();
    let lines: Vec<&str> = trace.lines().collect();
    assert_eq!(lines[0], "iter,objective,lagrangian,max_over_violation,max_under_violation,residual,coupling_ops,step_ns");
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("0,0,"), "{}", lines[1]);
    let summary = read_json(out_dir.join("summary.json"));
    assert_eq!(summary["iterations"], 0);
    assert_eq!(summary["status"], "max_iterations");
    let setpoints = read_json(out_dir.join("setpoints.json"));
    let devices = read_json(feeder.join("devices.json"));
    let first = &devices["devices"][0];
    let entry = setpoints["indices"]
        .as_array()
        .unwrap()
        .iter()
        .find(|e| e["bus"] == first["bus"] && e["phase"] == first["phase"])
        .unwrap();
    assert_eq!(entry["p"], first["p0"]);
    assert_eq!(entry["q"], first["q0"]);
}

#[test]
fn engines_report_equal_objectives() {
    let tmp = TempDir::new().unwrap();
    let feeder = generated(&tmp, &["--buses", "300", "--heavy", "--seed", "2"]);
    let mut objectives = Vec::new();
    let mut ops = Vec::new();
    for engine in ["flat", "bilevel", "trilevel"] {
        let dir = tmp.path().join(engine);
        let mut args = vec!["--engine", engine, "--iters", "150"];
        args.extend_from_slice(&REGULATION);
        let out = solve(&feeder, &dir, &args);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        let summary = read_json(dir.join("summary.json"));
        assert_eq!(summary["engine"], engine);
        objectives.push(summary["final_objective"].as_f64().unwrap());
        ops.push(summary["total_coupling_ops"].as_u64().unwrap());
    }
    assert!(objectives[0] > 0.0);
    for o in &objectives[1..] {
        assert!(
            (o - objectives[0]).abs() <= 1e-6 * objectives[0].abs(),
            "{objectives:?}"
        );
    }
    assert!(ops[1] < ops[0] && ops[2] < ops[1], "{ops:?}");
}

#[test]
fn repeated_runs_write_identical_traces() {
    let tmp = TempDir::new().unwrap();
    let feeder = generated(
        &tmp,
        &["--buses", "120", "--load-scale", "6", "--seed", "5"],
    );
    let mut traces = Vec::new();
    for i in 0..2 {
        let dir = tmp.path().join(format!("run{i}"));
        let mut args = vec!["--iters", "60", "--omit-timing"];
        args.extend_from_slice(&REGULATION);
        assert!(solve(&feeder, &dir, &args).status.success());
        traces.push(fs::read(dir.join("trace.csv")).unwrap());
    }
    assert_eq!(traces[0], traces[1]);
}

#[test]
fn require_convergence_sets_exit_status() {
    let tmp = TempDir::new().unwrap();
    let feeder = generated(&tmp, &["--buses", "300", "--heavy"]);
    let dir = tmp.path().join("run");
    let out = solve(&feeder, &dir, &["--iters", "3", "--require-convergence"]);
    assert_eq!(out.status.code(), Some(3));
    let record: Value = serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert_eq!(record["error"]["kind"], "not_converged");
    assert!(dir.join("trace.csv").exists());
}

#[test]
fn manifest_reproduces_the_run() {
    let tmp = TempDir::new().unwrap();
    let feeder = generated(&tmp, &["--buses", "80", "--load-scale", "5", "--seed", "1"]);
    let dir = tmp.path().join("run");
    let mut args = vec!["--iters", "40", "--omit-timing", "--engine", "bilevel"];
    args.extend_from_slice(&REGULATION);
    assert!(solve(&feeder, &dir, &args).status.success());
    let manifest = read_json(dir.join("manifest.json"));
    assert_eq!(manifest["settings"]["engine"], "bilevel");
    assert_eq!(manifest["solver"]["max_iters"], 40);

    let replay_dir = tmp.path().join("replay");
    let argv: Vec<String> = manifest["argv"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| a.as_str().unwrap().to_string())
        .collect();
    let mut replay: Vec<String> = argv[1..].to_vec();
    let out_pos = replay.iter().position(|a| a == "--out").unwrap();
    replay[out_pos + 1] = path(&replay_dir).to_string();
    let refs: Vec<&str> = replay.iter().map(String::as_str).collect();
    assert!(mlopf(&refs).status.success());
    assert_eq!(
        fs::read(dir.join("trace.csv")).unwrap(),
        fs::read(replay_dir.join("trace.csv")).unwrap()
    );
}

#[test]
fn audit_files_separate_private_and_global_engines() {
    let tmp = TempDir::new().unwrap();
    let feeder = generated(&tmp, &["--buses", "60", "--load-scale", "5"]);
    for (engine, global) in [("flat", true), ("trilevel", false)] {
        let dir = tmp.path().join(engine);
        let out = solve(
            &feeder,
            &dir,
            &["--engine", engine, "--iters", "5", "--audit"],
        );
        assert!(out.status.success());
        let lines = fs::read_to_string(dir.join("audit.jsonl")).unwrap();
        assert!(lines
            .lines()
            .all(|l| serde_json::from_str::<Value>(l).is_ok()));
        let report = read_json(dir.join("audit_report.json"));
        assert_eq!(report["global_access"], global);
        assert_eq!(report["foreign_dual_reads"], 0);
    }
}

#[test]
fn bench_reports_every_engine() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("bench");
    let out = mlopf(&[
        "bench",
        "--sizes",
        "256",
        "--iters",
        "3",
        "--out",
        path(&dir),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let mut reader = csv::Reader::from_path(dir.join("bench.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| &r[3] == "3"));
    let ops: Vec<u64> = rows.iter().map(|r| r[6].parse().unwrap()).collect();
    assert!(ops[0] > 3 * ops[1] && ops[2] < ops[1], "{ops:?}");
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.lines().next().unwrap().contains("engine"));
    assert_eq!(table, fs::read_to_string(dir.join("bench.txt")).unwrap());
}

#[test]
fn bench_row_matches_solve_on_same_documents() {
    let tmp = TempDir::new().unwrap();
    let feeder = generated(&tmp, &["--buses", "100", "--load-scale", "5"]);
    let bench_dir = tmp.path().join("bench");
    let out = mlopf(&[
        "bench",
        "--network",
        path(&feeder.join("network.json")),
        "--devices",
        path(&feeder.join("devices.json")),
        "--partition",
        path(&feeder.join("partition.json")),
        "--engines",
        "trilevel",
        "--iters",
        "20",
        "--tolerance",
        "1e-8",
        "--out",
        path(&bench_dir),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let solve_dir = tmp.path().join("solve");
    assert!(solve(&feeder, &solve_dir, &["--iters", "20"])
        .status
        .success());
    let summary = read_json(solve_dir.join("summary.json"));
    let mut reader = csv::Reader::from_path(bench_dir.join("bench.csv")).unwrap();
    let row = reader.records().next().unwrap().unwrap();
    assert_eq!(
        row[3].parse::<u64>().unwrap(),
        summary["iterations"].as_u64().unwrap()
    );
    assert_eq!(
        row[6].parse::<u64>().unwrap(),
        summary["total_coupling_ops"].as_u64().unwrap()
    );
}

#[test]
fn compare_writes_per_scenario_csv_and_reports_failures() {
    let tmp = TempDir::new().unwrap();
    let feeder = generated(&tmp, &["--buses", "80"]);
    let dir = tmp.path().join("cmp");
    let out = mlopf(&[
        "compare",
        "--network",
        path(&feeder.join("network.json")),
        "--devices",
        path(&feeder.join("devices.json")),
        "--scales",
        "0,1,500",
        "--out",
        path(&dir),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let zero = fs::read_to_string(dir.join("compare_0.csv")).unwrap();
    assert_eq!(
        zero.lines().next(),
        Some("flat_index,v_linear,v_nonlinear,diff")
    );
    let mut reader = csv::Reader::from_path(dir.join("compare_summary.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[0][3].parse::<f64>().unwrap() <= 1e-12);
    assert!(rows[1][3].parse::<f64>().unwrap() > 0.0);
    assert!(
        !rows[2][7].is_empty(),
        "heavy overload should fail the sweep"
    );
}

#[test]
fn partition_command_prints_valid_document() {
    let tmp = TempDir::new().unwrap();
    let feeder = generated(&tmp, &["--buses", "120"]);
    let net = feeder.join("network.json");
    let out = mlopf(&[
        "partition",
        "--network",
        path(&net),
        "--area-size",
        "30",
        "--subarea-size",
        "8",
    ]);
    assert!(out.status.success());
    let part = tmp.path().join("p.json");
    fs::write(&part, &out.stdout).unwrap();
    let check = mlopf(&[
        "validate",
        "--network",
        path(&net),
        "--partition",
        path(&part),
    ]);
    assert!(
        check.status.success(),
        "{}",
        String::from_utf8_lossy(&check.stderr)
    );
    let doc: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(!doc["areas"].as_array().unwrap().is_empty());
}
