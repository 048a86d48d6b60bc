use std::path::Path;
use std::process::{Command, Output};

fn hte(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hte-lab")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = hte(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_writes_table_shape() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    let truth = dir.path().join("t.csv");
    ok(&["simulate", "--scenario", "1", "--seed", "3", "--out", s(&data), "--truth", s(&truth)]);
    let mut r = csv::Reader::from_path(&data).unwrap();
    let header = r.headers().unwrap().clone();
    assert_eq!(header.len(), 402);
    assert_eq!(r.records().count(), 200);
    let mut t = csv::Reader::from_path(&truth).unwrap();
    assert_eq!(t.headers().unwrap().iter().collect::<Vec<_>>(), ["tau", "pi", "mu"]);
    assert_eq!(t.records().count(), 200);
}

#[test]
fn fit_predict_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    ok(&["simulate", "--scenario", "5", "--seed", "1", "--out", s(&p("d.csv"))]);
    std::fs::write(p("cfg.json"), r#"{"method":"causal_mars","seed":9}"#).unwrap();
    ok(&["fit", "--config", s(&p("cfg.json")), "--data", s(&p("d.csv")), "--out", s(&p("m.json"))]);
    ok(&["predict", "--model", s(&p("m.json")), "--data", s(&p("d.csv")), "--out", s(&p("e1.csv"))]);
    ok(&["predict", "--model", s(&p("m.json")), "--data", s(&p("d.csv")), "--out", s(&p("e2.csv"))]);
    let a = std::fs::read_to_string(p("e1.csv")).unwrap();
    assert_eq!(a, std::fs::read_to_string(p("e2.csv")).unwrap());
    assert!(a.starts_with("tau_hat,mu1_hat,mu0_hat"));
    assert_eq!(a.lines().count(), 401);

    let out = ok(&["report", "--estimates", s(&p("e1.csv")), "--data", s(&p("d.csv")), "--feature", "x1", "--bins", "4"]);
    let rows: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 4);
}

#[test]
fn benchmark_rows_and_repeatability() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let summary = dir.path().join("s.json");
    for out in [&a, &b] {
        ok(&[
            "benchmark", "--scenarios", "1", "--methods", "null", "--reps", "2", "--seed", "4", "--out", s(out),
            "--summary", s(&summary),
        ]);
    }
    let strip = |p: &Path| -> Vec<Vec<String>> {
        csv::Reader::from_path(p)
            .unwrap()
            .records()
            .map(|r| r.unwrap().iter().take(5).map(String::from).collect())
            .collect()
    };
    assert_eq!(strip(&a).len(), 2);
    assert_eq!(strip(&a), strip(&b));
    let sum: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&summary).unwrap()).unwrap();
    assert_eq!(sum[0]["n_ok"], 2);
}

#[test]
fn errors_are_json_on_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let out = hte(&["fit", "--config", "/nonexistent.json", "--data", "x.csv", "--out", s(&dir.path().join("m"))]);
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "io-error");

    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"method":"causal_boost","params":{"boost":{"ntrees":5}}}"#).unwrap();
    let data = dir.path().join("d.csv");
    ok(&["simulate", "--scenario", "2", "--out", s(&data)]);
    let out = hte(&["fit", "--config", s(&cfg), "--data", s(&data), "--out", s(&dir.path().join("m"))]);
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "malformed-document");

    let out = hte(&["benchmark", "--scenarios", "1", "--methods", "magic", "--out", s(&dir.path().join("b"))]);
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "unknown-method");
}

#[test]
fn thread_count_env_fallback_is_validated() {
    let out = Command::new(env!("CARGO_BIN_EXE_hte-lab"))
        .args(["simulate", "--scenario", "1", "--out", "/dev/null"])
        .env("HTE_LAB_THREADS", "lots")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "invalid-parameter");
}
