use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_survitmle"))
        .current_dir(dir)
        .env("RUST_LOG", "error")
        .args(args)
        .output()
        .unwrap();
    out
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn simulate_fit_predict_evaluate_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["simulate", "--dgp", "2", "--truncation", "none", "--n", "150", "--seed", "3", "--out", "train.csv"]);
    assert!(d.join("train.csv.manifest.json").exists());
    ok(d, &["truth", "--dgp", "2", "--m", "20", "--mc-reps", "2000", "--out", "truth"]);
    ok(d, &["fit", "--data", "train.csv", "--dgp", "2", "--workers", "1", "--out", "fit"]);
    for f in ["pseudo.csv", "curves.csv", "model.json", "diagnostics.json"] {
        assert!(d.join("fit").join(f).exists(), "{f}");
    }
    ok(d, &["predict", "--model", "fit/model.json", "--x", "truth/test_x.csv", "--out", "pred.csv"]);
    let curves = std::fs::read_to_string(d.join("pred.csv")).unwrap();
    assert_eq!(curves.lines().count(), 1 + 20 * 10);
    let stdout = ok(d, &["evaluate", "--curves", "pred.csv", "--truth", "truth/truth.csv", "--out", "rmse.csv"]);
    assert!(stdout.contains("overall mean RMSE"));
    let rmse = std::fs::read_to_string(d.join("rmse.csv")).unwrap();
    for line in rmse.lines().skip(1) {
        let v: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!((0.0..=2.0).contains(&v));
    }
}

#[test]
fn bad_inputs_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let out = run(d, &["evaluate", "--curves", "missing.csv", "--truth", "missing.csv"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
    assert!(!run(d, &["simulate", "--dgp", "7"]).status.success());
    assert!(!run(d, &["fit", "--data", "x.csv", "--grid", "1,2", "--dgp", "1"]).status.success());
}
