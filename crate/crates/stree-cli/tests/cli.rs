//! End-to-end tests against the built `stree` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn stree() -> Command {
    Command::new(env!("CARGO_BIN_EXE_stree"))
}

fn run(args: &[&str]) -> Output {
    stree().args(args).output().expect("spawn stree")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(
        out.status.success(),
        "stree failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn preset_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../presets")
        .join(format!("{name}.json"))
}

#[test]
fn generate_speculative_equals_autoregressive() {
    let common = [
        "--prompt", "1,5,9",
        "--max-tokens", "40",
        "--seed", "12",
        "--format", "json",
    ];
    let speculated = stdout_json(&run(
        &[&["generate", "--tree", "binary:3"], &common[..]].concat(),
    ));
    let base = stdout_json(&run(
        &[&["generate", "--mode", "autoregressive"], &common[..]].concat(),
    ));
    assert_eq!(speculated["output"], base["output"]);
    assert_eq!(speculated["stats"]["tokens"], 40);
    // The draft tree must have paid off somewhere.
    assert!(speculated["stats"]["tau"].as_f64().unwrap() >= 1.0);
    assert_eq!(base["stats"]["tau"].as_f64().unwrap(), 1.0);
}

#[test]
fn generate_stats_json_has_the_documented_shape() {
    let out = stdout_json(&run(&[
        "generate",
        "--tree",
        "chain:4",
        "--draft",
        "self",
        "--max-tokens",
        "10",
        "--format",
        "json",
    ]));
    let stats = &out["stats"];
    assert_eq!(stats["tokens"], 10);
    assert_eq!(stats["calls"], 2);
    assert_eq!(stats["tau"], 5.0);
    assert_eq!(stats["histogram"], serde_json::json!([0, 0, 0, 0, 0, 2]));
}

#[test]
fn preset_files_match_builtin_shapes() {
    for name in ["A", "B", "C", "D", "E"] {
        let path = preset_path(name);
        let common = ["--max-tokens", "24", "--seed", "4", "--format", "json"];
        let builtin = stdout_json(&run(
            &[&["generate", "--tree", name], &common[..]].concat(),
        ));
        let from_file = stdout_json(&run(&[
            &["generate", "--tree", path.to_str().unwrap()],
            &common[..],
        ]
        .concat()));
        assert_eq!(builtin["output"], from_file["output"], "preset {name}");
        assert_eq!(builtin["stats"], from_file["stats"], "preset {name}");
    }
}

#[test]
fn bench_then_analyze_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bench.csv");
    let out = run(&[
        "bench",
        "--depths",
        "4,5",
        "--warmup",
        "1",
        "--reps",
        "3",
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "depth,packed_tokens,unrolled_tokens,packed_ms,unrolled_ms"
    );
    let first: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(&first[..3], &["4", "15", "32"]);
    let second: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(&second[..3], &["5", "31", "80"]);

    let report = stdout_json(&run(&[
        "analyze",
        "--input",
        csv.to_str().unwrap(),
        "--format",
        "json",
    ]));
    assert_eq!(report["series"], "packed");
    assert!(report["fit"]["residual"].as_f64().unwrap() >= 0.0);
}

#[test]
fn analyze_recovers_exact_fits_and_ratios() {
    let dir = tempfile::tempdir().unwrap();

    // t(N) = 2N + 100 in the packed column.
    let linear = dir.path().join("linear.csv");
    std::fs::write(
        &linear,
        "depth,packed_tokens,unrolled_tokens,packed_ms,unrolled_ms\n\
         4,15,32,130.0,1.0\n5,31,80,162.0,1.0\n6,63,192,226.0,1.0\n",
    )
    .unwrap();
    let report = stdout_json(&run(&[
        "analyze",
        "--input",
        linear.to_str().unwrap(),
        "--n1",
        "15",
        "--n2",
        "15",
        "--format",
        "json",
    ]));
    assert_eq!(report["fit"]["kind"], "linear");
    let params: Vec<f64> = report["fit"]["params"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert!((params[0] - 2.0).abs() < 1e-9 && (params[1] - 100.0).abs() < 1e-9);
    assert!(report["fit"]["residual"].as_f64().unwrap() < 1e-9);
    assert_eq!(report["ratio"]["required_tau_ratio"], 1.0);

    // t(N) = 0.5 N^2 + N + 3 in the unrolled column.
    let quad = dir.path().join("quad.csv");
    std::fs::write(
        &quad,
        "depth,packed_tokens,unrolled_tokens,packed_ms,unrolled_ms\n\
         4,15,15,1.0,130.5\n5,31,31,1.0,514.5\n6,63,63,1.0,2050.5\n",
    )
    .unwrap();
    let report = stdout_json(&run(&[
        "analyze",
        "--input",
        quad.to_str().unwrap(),
        "--series",
        "unrolled",
        "--format",
        "json",
    ]));
    assert_eq!(report["fit"]["kind"], "quadratic");
    assert!(report["fit"]["residual"].as_f64().unwrap() < 1e-9);
}

#[test]
fn verify_reports_suites_and_exit_codes() {
    let out = run(&["verify", "--instances", "20", "--format", "json"]);
    assert!(out.status.success());
    let reports: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let suites = reports.as_array().unwrap();
    assert_eq!(suites.len(), 4);
    assert!(suites.iter().all(|s| s["pass"].as_bool().unwrap()));

    let injected = run(&[
        "verify",
        "--suite",
        "scan",
        "--instances",
        "5",
        "--inject-error",
    ]);
    assert_eq!(injected.status.code(), Some(1));
    let text = String::from_utf8_lossy(&injected.stdout);
    assert!(text.contains("FAILED"), "{text}");
}

#[test]
fn usage_errors_exit_with_code_2() {
    let bad_tree = run(&["generate", "--tree", "no-such-shape"]);
    assert_eq!(bad_tree.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad_tree.stderr).contains("--tree"));

    let bad_prompt = run(&["generate", "--prompt", "1,notanumber"]);
    assert_eq!(bad_prompt.status.code(), Some(2));

    let missing_csv = run(&["analyze", "--input", "/nonexistent/bench.csv"]);
    assert_eq!(missing_csv.status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let bad_csv = dir.path().join("bad.csv");
    std::fs::write(&bad_csv, "wrong,header\n1,2\n").unwrap();
    let parse_fail = run(&["analyze", "--input", bad_csv.to_str().unwrap()]);
    assert_eq!(parse_fail.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&parse_fail.stderr).contains("line 1"));

    let unknown_flag = run(&["generate", "--frobnicate"]);
    assert_eq!(unknown_flag.status.code(), Some(2));
}

#[test]
fn vanilla_sd_mode_runs_the_classic_loop() {
    let out = stdout_json(&run(&[
        "generate",
        "--mode",
        "vanilla-sd",
        "--temperature",
        "0.7",
        "--seed",
        "5",
        "--max-tokens",
        "32",
        "--format",
        "json",
    ]));
    assert_eq!(out["mode"], "vanilla-sd");
    assert_eq!(out["draft"], "chain:4");
    assert_eq!(out["verifier"], "mss");
    assert_eq!(out["output"].as_array().unwrap().len(), 32);
}
