use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: [&str; 10] = [
    "--set",
    "synth.n_videos=24",
    "--set",
    "synth.val_videos=6",
    "--set",
    "synth.t_min=30",
    "--set",
    "synth.t_max=40",
    "--set",
    "train.steps=20",
];

fn lgbm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lgbm"))
        .args(args)
        .output()
        .expect("run lgbm")
}

fn ok(args: &[&str]) -> String {
    let out = lgbm(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend(SMALL);
    v
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthesizes, trains, detects, and evaluates under `dir`.
fn pipeline(dir: &Path) {
    let (data, run) = (dir.join("data"), dir.join("run"));
    let (results, report) = (dir.join("results.json"), dir.join("report.json"));
    ok(&with_small(&["synth", "--out", s(&data), "--seed", "3"]));
    ok(&with_small(&[
        "train",
        "--data",
        s(&data),
        "--out",
        s(&run),
    ]));
    ok(&with_small(&[
        "detect",
        "--ckpt",
        s(&run.join("final.lgbf")),
        "--data",
        s(&data),
        "--out",
        s(&results),
        "--workers",
        "1",
    ]));
    let table = ok(&[
        "eval",
        "--results",
        s(&results),
        "--gt",
        s(&data.join("annotations.json")),
        "--out",
        s(&report),
    ]);
    assert!(table.contains("Average mAP"), "{table}");
}

fn error_line(out: &Output) -> Value {
    let stderr = String::from_utf8(out.stderr.clone()).unwrap();
    let line = stderr.lines().last().expect("an error line on stderr");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {stderr}"))
}

#[test]
fn full_pipeline_produces_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    pipeline(d);

    let log = fs::read_to_string(d.join("run/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 20);
    let report: Value = serde_json::from_slice(&fs::read(d.join("report.json")).unwrap()).unwrap();
    let avg = report["average_map"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&avg));

    let results: Value =
        serde_json::from_slice(&fs::read(d.join("results.json")).unwrap()).unwrap();
    let video = results["results"]
        .as_object()
        .unwrap()
        .keys()
        .next()
        .unwrap()
        .clone();
    let png = d.join("cas.png");
    ok(&[
        "plot-cas",
        "--ckpt",
        s(&d.join("run/final.lgbf")),
        "--data",
        s(&d.join("data")),
        "--video",
        &video,
        "--out",
        s(&png),
    ]);
    assert_eq!(&fs::read(&png).unwrap()[..4], b"\x89PNG");
}

#[test]
fn identical_runs_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path());
    pipeline(b.path());
    for file in [
        "results.json",
        "report.json",
        "run/train_log.jsonl",
        "run/final.lgbf",
    ] {
        assert_eq!(
            fs::read(a.path().join(file)).unwrap(),
            fs::read(b.path().join(file)).unwrap(),
            "{file} differs"
        );
    }
}

#[test]
fn self_ensemble_leaves_the_score_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    pipeline(d);
    let results = d.join("results.json");
    let fused = d.join("fused.json");
    let fused_report = d.join("fused_report.json");
    ok(&[
        "ensemble",
        "--inputs",
        s(&results),
        s(&results),
        "--out",
        s(&fused),
    ]);
    ok(&[
        "eval",
        "--results",
        s(&fused),
        "--gt",
        s(&d.join("data/annotations.json")),
        "--out",
        s(&fused_report),
    ]);
    let avg = |p: &Path| {
        let v: Value = serde_json::from_slice(&fs::read(p).unwrap()).unwrap();
        v["average_map"].as_f64().unwrap()
    };
    assert_eq!(avg(&d.join("report.json")), avg(&fused_report));
}

#[test]
fn synth_rerun_overwrites_with_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&with_small(&["synth", "--out", s(&data)]));
    let first = fs::read(data.join("annotations.json")).unwrap();
    ok(&with_small(&["synth", "--out", s(&data)]));
    assert_eq!(first, fs::read(data.join("annotations.json")).unwrap());
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = lgbm(&[
        "synth",
        "--out",
        s(&dir.path().join("x")),
        "--set",
        "synth.no_such_key=1",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["error"], "config");

    let out = lgbm(&[
        "synth",
        "--out",
        s(&dir.path().join("x")),
        "--set",
        "synth.num_classes=1",
    ]);
    assert_eq!(out.status.code(), Some(2));

    let out = lgbm(&["detect", "--bogus-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["error"], "config");
}

#[test]
fn data_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    let out = lgbm(&[
        "train",
        "--data",
        s(&missing),
        "--out",
        s(&dir.path().join("run")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    let err = error_line(&out);
    assert_eq!(err["error"], "data");
    assert!(err["message"].as_str().unwrap().contains("missing"));

    let garbage = dir.path().join("results.json");
    fs::write(&garbage, "not json").unwrap();
    let out = lgbm(&["eval", "--results", s(&garbage), "--gt", s(&garbage)]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn divergence_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&with_small(&["synth", "--out", s(&data)]));
    let out = lgbm(&with_small(&[
        "train",
        "--data",
        s(&data),
        "--out",
        s(&dir.path().join("run")),
        "--set",
        "train.learning_rate=1e300",
        "--set",
        "train.grad_clip=0",
    ]));
    assert_eq!(
        out.status.code(),
        Some(4),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(error_line(&out)["error"], "numerical");
}
