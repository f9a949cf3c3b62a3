use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_strgode")).args(args).env_remove("STRGODE_THREADS").output().expect("spawn strgode")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    run(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: [&str; 6] = ["--set", "d=4", "--set", "max_epochs=1", "--set", "batch_size=16"];

/// Synthetic bundle plus one trained model, shared by the tests below.
fn trained() -> &'static (TempDir, PathBuf, PathBuf) {
    static CELL: OnceLock<(TempDir, PathBuf, PathBuf)> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let model = dir.path().join("model");
        ok(&["synth", "--stations", "4", "--days", "10", "--seed", "2", "--out", s(&data)]);
        let mut args = vec!["train", "--data", s(&data), "--out", s(&model), "--seed", "1"];
        args.extend(SMALL);
        ok(&args);
        (dir, data, model)
    })
}

#[test]
fn synth_writes_the_bundle() {
    let (_, data, _) = trained();
    for f in ["ridership.csv", "edges.csv", "od.csv", "physical.graph", "similarity.graph", "correlation.graph"] {
        assert!(data.join(f).is_file(), "{f} missing");
    }
    let header = fs::read_to_string(data.join("ridership.csv")).unwrap();
    assert!(header.starts_with("time,station_id,inflow,outflow\n"));
}

#[test]
fn rebuilt_graphs_match_synthetic_ones() {
    let (dir, data, _) = trained();
    let out = dir.path().join("rebuilt");
    let (ridership, od, edges) = (data.join("ridership.csv"), data.join("od.csv"), data.join("edges.csv"));
    let args = [
        "build-graphs",
        "--ridership",
        s(&ridership),
        "--od",
        s(&od),
        "--edges",
        s(&edges),
        "--out",
        s(&out),
    ];
    // the default top_k:10 needs more than 4 stations
    let e = run(&args);
    assert_eq!(e.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&e.stderr).contains("top_k"));
    let mut args = args.to_vec();
    args.extend(["--set", "similarity_selection=top_k:3"]);
    ok(&args);
    for f in ["physical.graph", "similarity.graph", "correlation.graph"] {
        assert_eq!(fs::read(data.join(f)).unwrap(), fs::read(out.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn train_writes_checkpoint_log_and_config() {
    let (_, _, model) = trained();
    let log = fs::read_to_string(model.join("train.log")).unwrap();
    assert!(log.starts_with("# digest="));
    assert_eq!(log.lines().filter(|l| !l.starts_with('#')).count(), 1, "{log}");
    let conf = fs::read_to_string(model.join("run.conf")).unwrap();
    assert!(conf.lines().any(|l| l == "d = 4"), "{conf}");
    assert!(conf.lines().any(|l| l == "seed = 1"), "{conf}");
}

#[test]
fn evaluate_model_and_baselines() {
    let (dir, data, model) = trained();
    let ckpt = model.join("model.ckpt");
    let out = dir.path().join("eval");
    let text = ok(&["evaluate", "--data", s(data), "--checkpoint", s(&ckpt), "--protocol", "conventional,peak", "--out", s(&out)]);
    assert!(text.contains("conventional"));
    let csv = fs::read_to_string(out.join("report_conventional.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| l.starts_with("conventional,")).count(), 4, "{csv}");
    assert!(out.join("report_peak.txt").is_file());

    for baseline in ["persistence", "historical"] {
        let bout = dir.path().join(baseline);
        let mut args = vec!["evaluate", "--data", s(data), "--baseline", baseline, "--protocol", "conventional", "--out", s(&bout)];
        args.extend(SMALL);
        ok(&args);
        let report = fs::read_to_string(bout.join("report_conventional.txt")).unwrap();
        assert!(report.contains(&format!("predictor: {baseline}")), "{report}");
    }
}

#[test]
fn predict_continues_after_the_last_observation() {
    let (dir, data, model) = trained();
    let rows: Vec<String> = fs::read_to_string(data.join("ridership.csv")).unwrap().lines().skip(1 + 4 * 20).take(4 * 4).map(String::from).collect();
    let obs = dir.path().join("obs.csv");
    fs::write(&obs, format!("time,station_id,inflow,outflow\n{}\n", rows.join("\n"))).unwrap();
    let out = dir.path().join("pred.csv");
    ok(&["predict", "--checkpoint", s(&model.join("model.ckpt")), "--graphs", s(data), "--observations", s(&obs), "--horizon", "3", "--out", s(&out)]);
    let text = fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# digest="));
    assert_eq!(lines.next(), Some("time,station_id,inflow,outflow"));
    let body: Vec<&str> = lines.collect();
    assert_eq!(body.len(), 3 * 4);
    // bins start at 05:30 in 15-minute steps; observations cover 10:30 to 11:15
    assert!(body[0].starts_with(&format!("{}T11:30:00,0,", &rows[0][..10])), "{}", body[0]);
    assert!(body[11].contains("T12:00:00,3,"), "{}", body[11]);
}

#[test]
fn mismatched_model_config_is_refused() {
    let (dir, data, model) = trained();
    let ckpt = model.join("model.ckpt");
    let out = dir.path().join("bad");
    assert_eq!(code(&["evaluate", "--data", s(data), "--checkpoint", s(&ckpt), "--set", "d=5", "--out", s(&out)]), 1);
    assert!(!out.exists());
}

#[test]
fn argument_and_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    assert_eq!(code(&["synth"]), 2);
    assert_eq!(code(&["train", "--data", s(&out), "--bogus"]), 2);
    assert_eq!(code(&["--set", "no_such_key=1", "synth", "--out", s(&out)]), 1);
    assert_eq!(code(&["--set", "d=zero", "synth", "--out", s(&out)]), 1);
    assert_eq!(code(&["evaluate", "--data", s(&out), "--baseline", "oracle", "--out", s(&out)]), 1);
    assert_eq!(code(&["--help"]), 0);
    let conf = dir.path().join("run.conf");
    fs::write(&conf, "d = 4\nmystery = 3\n").unwrap();
    let e = run(&["--config", s(&conf), "synth", "--out", s(&out)]);
    assert_eq!(e.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&e.stderr).contains("line 2"), "{}", String::from_utf8_lossy(&e.stderr));
}
