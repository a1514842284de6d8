use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn matseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_matseg"))
        .args(args)
        .env_remove("MATSEG_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = matseg(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

/// `(t, row, col) -> value` rows of a long-format file, comments skipped.
fn cells(p: &Path) -> Vec<(usize, usize, usize, f64)> {
    std::fs::read_to_string(p)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("t,"))
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[1].parse().unwrap(), f[2].parse().unwrap(), f[3].parse().unwrap())
        })
        .collect()
}

#[test]
fn simulate_is_deterministic_and_echoes_config() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let run = || {
        ok(&["simulate", "--design", "example2", "--p", "3", "--q", "6", "--T", "300", "--seed", "7", "--out", s(&a)]);
        std::fs::read(a.join("x.csv")).unwrap()
    };
    let xa = run();
    assert_eq!(xa, run());
    let text = String::from_utf8(xa).unwrap();
    let first = text.lines().next().unwrap();
    assert!(first.starts_with("# matseg/1 {"));
    let cfg: Value = serde_json::from_str(first.trim_start_matches("# matseg/1 ")).unwrap();
    assert_eq!(cfg["seed"], 7);
    assert_eq!(cfg["design"], "example2");
    assert_eq!(cells(&a.join("x.csv")).len(), 300 * 18);
    assert!(!a.join("cond_mean.csv").exists());
}

#[test]
fn example3_sidecar_matches_generator() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["simulate", "--design", "example3", "--T", "120", "--seed", "5", "--out", s(dir.path()), "--with-truth"]);
    let (_, truth) = matseg::simgen::generate(matseg::simgen::Design::Example3, 120, 6, 6, 5).unwrap();
    let mu = truth.cond_mean.unwrap();
    let file = cells(&dir.path().join("cond_mean.csv"));
    assert_eq!(file.len(), 120 * 36);
    for (t, r, c, v) in file {
        assert_eq!(v, mu[t - 1][(r - 1, c - 1)]);
    }
    let doc = json(&dir.path().join("truth.json"));
    assert_eq!(doc["schema"], "matseg/1");
    assert_eq!(doc["truth"]["col_groups"]["groups"].as_array().unwrap().len(), 3);
    assert!(dir.path().join("u.csv").exists());
}

#[test]
fn segment_reports_both_modes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["simulate", "--design", "example2", "--p", "3", "--q", "6", "--T", "2000", "--seed", "3", "--out", s(d)]);
    let report = d.join("seg.json");
    ok(&["segment", "--input", s(&d.join("x.csv")), "--out", s(&report)]);
    let doc = json(&report);
    assert_eq!(doc["config"]["tau0"], 5);
    assert_eq!(doc["config"]["tau1"], 15);
    let seg = &doc["segmentation"];
    assert_eq!(seg["columns"]["eigenvalues"].as_array().unwrap().len(), 6);
    assert_eq!(seg["rows"]["eigenvalues"].as_array().unwrap().len(), 3);
    assert_eq!(seg["columns"]["rho_table"]["entries"].as_array().unwrap().len(), 15);
    assert!(seg["transform"]["a_star"]["data"].is_array());
    let groups: usize = seg["columns"]["groups"].as_array().unwrap().iter().map(|g| g.as_array().unwrap().len()).sum();
    assert_eq!(groups, 6);
}

#[test]
fn single_column_input_gives_one_group() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["simulate", "--design", "example1", "--p", "3", "--q", "1", "--T", "200", "--seed", "2", "--out", s(d)]);
    ok(&["segment", "--input", s(&d.join("x.csv")), "--out", s(&d.join("seg.json"))]);
    let doc = json(&d.join("seg.json"));
    assert_eq!(doc["segmentation"]["columns"]["groups"], serde_json::json!([[1]]));
}

#[test]
fn high_threshold_on_noise_gives_singletons() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut text = String::from("t,row,col,value\n");
    let mut state = 12345u64;
    for t in 1..=400 {
        for r in 1..=2 {
            for c in 1..=4 {
                // xorshift noise is plenty for a null check
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                let v = (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5;
                text.push_str(&format!("{t},{r},{c},{v}\n"));
            }
        }
    }
    std::fs::write(d.join("x.csv"), text).unwrap();
    ok(&["segment", "--input", s(&d.join("x.csv")), "--out", s(&d.join("seg.json")), "--selector", "threshold:0.999"]);
    let doc = json(&d.join("seg.json"));
    assert_eq!(doc["segmentation"]["columns"]["n_groups"], 4);
    assert_eq!(doc["segmentation"]["rows"]["n_groups"], 2);
}

#[test]
fn transform_round_trips_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["simulate", "--design", "example1", "--p", "3", "--q", "4", "--T", "300", "--seed", "9", "--out", s(d)]);
    ok(&["transform", "--input", s(&d.join("x.csv")), "--out", s(&d.join("fwd"))]);
    ok(&[
        "transform",
        "--input",
        s(&d.join("fwd/latent.csv")),
        "--apply",
        s(&d.join("fwd/transform.json")),
        "--inverse",
        "--out",
        s(&d.join("inv")),
    ]);
    let x = cells(&d.join("x.csv"));
    let back = cells(&d.join("inv/observed.csv"));
    let scale = x.iter().map(|c| c.3.abs()).fold(0.0, f64::max);
    for (a, b) in x.iter().zip(&back) {
        assert_eq!((a.0, a.1, a.2), (b.0, b.1, b.2));
        assert!((a.3 - b.3).abs() <= 1e-6 * scale);
    }
}

#[test]
fn forecast_writes_all_reports() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["simulate", "--design", "example3", "--T", "150", "--seed", "4", "--out", s(d)]);
    let fc = d.join("fc");
    let x = d.join("x.csv");
    let mu = d.join("cond_mean.csv");
    ok(&[
        "forecast", "--input", s(&x), "--out", s(&fc), "--holdout", "8", "--truth-file", s(&mu), "--baselines",
        "var1_stacked,mar1_direct,ar1_per_cell", "--week", "3",
    ]);
    let doc = json(&fc.join("forecast.json"));
    let main = &doc["forecast"]["segmentation"];
    assert_eq!(main["truth_kind"], "conditional_mean");
    assert_eq!(main["scheme"], "fixed");
    assert_eq!(main["step_mse"].as_array().unwrap().len(), 8);
    assert_eq!(doc["forecast"]["baselines"].as_array().unwrap().len(), 3);
    let weekly = std::fs::read_to_string(fc.join("weekly_mspe.csv")).unwrap();
    // 8 targets in windows of 3 give 3 rows per method, 4 methods
    assert_eq!(weekly.lines().filter(|l| !l.starts_with('#')).count(), 1 + 12);
    let steps = std::fs::read_to_string(fc.join("steps.csv")).unwrap();
    assert_eq!(steps.lines().filter(|l| !l.starts_with('#')).count(), 1 + 32);
    assert!(fc.join("predictions.csv").exists());

    let one = d.join("one");
    ok(&["forecast", "--input", s(&x), "--out", s(&one), "--holdout", "1", "--scheme", "refit"]);
    let doc = json(&one.join("forecast.json"));
    assert_eq!(doc["forecast"]["segmentation"]["step_mse"].as_array().unwrap().len(), 1);
    assert_eq!(doc["forecast"]["segmentation"]["scheme"], "refit");
    assert_eq!(doc["forecast"]["segmentation"]["truth_kind"], "realized");
}

#[test]
fn bench_smoke_is_fast_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let start = std::time::Instant::now();
    ok(&["bench", "--table", "1", "--cell", "q4p4,T100", "--reps", "1", "--out", s(&d.join("a"))]);
    assert!(start.elapsed().as_secs_f64() < 5.0);
    ok(&["bench", "--table", "1", "--cell", "q4p4,T100", "--reps", "1", "--out", s(&d.join("b")), "--threads", "2"]);
    let a = std::fs::read_to_string(d.join("a/summary.csv")).unwrap();
    let b = std::fs::read_to_string(d.join("b/summary.csv")).unwrap();
    // the echoed config differs only in the thread count
    assert_eq!(a.lines().skip(1).collect::<Vec<_>>(), b.lines().skip(1).collect::<Vec<_>>());
}

#[test]
fn config_file_overrides_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("c.json"), r#"{"T": 50, "seed": 99}"#).unwrap();
    ok(&["simulate", "--design", "example1", "--T", "500", "--seed", "1", "--config", s(&d.join("c.json")), "--out", s(d)]);
    let x = cells(&d.join("x.csv"));
    assert_eq!(x.iter().map(|c| c.0).max(), Some(50));
    std::fs::write(d.join("bad.json"), r#"{"tau9": 1}"#).unwrap();
    let out = matseg(&["simulate", "--config", s(&d.join("bad.json")), "--out", s(d)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(matseg(&["segment", "--input", "/nonexistent/x.csv", "--out", s(&d.join("r.json"))]).status.code(), Some(3));
    assert_eq!(matseg(&["bench", "--table", "9", "--out", s(d)]).status.code(), Some(2));
    assert_eq!(matseg(&["simulate", "--design", "example7", "--out", s(d)]).status.code(), Some(2));
    assert_eq!(matseg(&["segment", "--input", "x.csv", "--out", "r.json", "--c-r", "1.5"]).status.code(), Some(2));

    std::fs::write(d.join("gap.csv"), "t,row,col,value\n1,1,1,1.0\n1,1,2,2.0\n2,1,1,3.0\n").unwrap();
    let out = matseg(&["segment", "--input", s(&d.join("gap.csv")), "--out", s(&d.join("r.json"))]);
    assert_eq!(out.status.code(), Some(3));

    // holdout leaves no training data
    ok(&["simulate", "--design", "example1", "--p", "2", "--q", "2", "--T", "20", "--out", s(d)]);
    let out = matseg(&["forecast", "--input", s(&d.join("x.csv")), "--holdout", "20", "--out", s(&d.join("f"))]);
    assert_eq!(out.status.code(), Some(2));

    // a series without variance cannot be whitened
    let mut text = String::from("t,row,col,value\n");
    for t in 1..=40 {
        for r in 1..=2 {
            for c in 1..=2 {
                text.push_str(&format!("{t},{r},{c},0\n"));
            }
        }
    }
    std::fs::write(d.join("flat.csv"), text).unwrap();
    let out = matseg(&["segment", "--input", s(&d.join("flat.csv")), "--out", s(&d.join("r.json"))]);
    assert_eq!(out.status.code(), Some(4));
}
