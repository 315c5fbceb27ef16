//! Black-box tests of the installed binary: a miniature synth -> prepare ->
//! train -> eval -> predict flow, error reporting, and output conventions.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rri-seqnet"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("spawn binary");
    assert!(
        out.status.success(),
        "command {:?} failed\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn run_err(args: &[&str]) -> serde_json::Value {
    let out = bin().args(args).output().expect("spawn binary");
    assert!(
        !out.status.success(),
        "command {args:?} unexpectedly succeeded"
    );
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr
        .lines()
        .last()
        .unwrap_or_else(|| panic!("no stderr for {args:?}"));
    serde_json::from_str(line).unwrap_or_else(|e| panic!("stderr not JSON ({e}): {stderr}"))
}

/// Every stdout line must parse as a JSON object carrying an "event" key.
fn events(out: &Output) -> Vec<serde_json::Value> {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(|line| {
            let v: serde_json::Value =
                serde_json::from_str(line).unwrap_or_else(|e| panic!("bad log line ({e}): {line}"));
            assert!(v.get("event").is_some(), "log line without event: {line}");
            v
        })
        .collect()
}

fn count_csvs(dir: &Path) -> usize {
    std::fs::read_dir(dir)
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .path()
                .extension()
                .is_some_and(|x| x == "csv")
        })
        .count()
}

const TINY_MODEL: &[&str] = &[
    "--set",
    "model.tcn_channels=2",
    "--set",
    "model.d_model=2",
    "--set",
    "model.d_state=2",
    "--set",
    "model.tcn_dilations=1,2",
    "--set",
    "model.head_dims=4,2",
];

#[test]
fn full_flow_on_tiny_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw");
    let prep = dir.path().join("prep");
    let run = dir.path().join("run");
    let raw_s = raw.to_str().unwrap();
    let prep_s = prep.to_str().unwrap();
    let run_s = run.to_str().unwrap();

    // synth
    let out = run_ok(&[
        "synth",
        "--nsr",
        "3",
        "--af",
        "4",
        "--seed",
        "7",
        "--out",
        raw_s,
        "--set",
        "synth.control_duration_s=7200",
    ]);
    let evs = events(&out);
    assert_eq!(evs.last().unwrap()["event"], "synth.done");
    assert_eq!(evs.last().unwrap()["files"], 7);
    assert_eq!(count_csvs(&raw), 7);
    assert!(raw.join("manifest.json").is_file());
    let resolved = std::fs::read_to_string(raw.join("config.resolved")).unwrap();
    assert!(
        resolved.contains("synth.control_duration_s=7200"),
        "{resolved}"
    );

    // refuses to reuse the directory without --force, then allows it with
    let err = run_err(&["synth", "--nsr", "1", "--af", "0", "--out", raw_s]);
    assert_eq!(err["error"]["kind"], "config");
    assert!(err["error"]["message"]
        .as_str()
        .unwrap()
        .contains("--force"));
    run_ok(&[
        "synth",
        "--nsr",
        "3",
        "--af",
        "4",
        "--seed",
        "7",
        "--out",
        raw_s,
        "--force",
        "--set",
        "synth.control_duration_s=7200",
    ]);

    // prepare
    let out = run_ok(&[
        "prepare", "--data", raw_s, "--out", prep_s, "--seeds", "101,102",
    ]);
    let evs = events(&out);
    assert_eq!(evs.last().unwrap()["event"], "prepare.done");
    assert_eq!(evs.last().unwrap()["segments"], 28);
    assert_eq!(evs.last().unwrap()["exclusions"], 0);
    assert!(prep.join("segments.bin").is_file());
    assert!(prep.join("splits_seed101.json").is_file());
    assert!(prep.join("splits_seed102.json").is_file());
    assert!(prep.join("exclusions.json").is_file());

    // train a tiny model for two epochs on one seed
    let mut args = vec![
        "train",
        "--prep",
        prep_s,
        "--out",
        run_s,
        "--seeds",
        "101",
        "--set",
        "optim.max_epochs=2",
        "--set",
        "optim.batch_size=4",
    ];
    args.extend_from_slice(TINY_MODEL);
    let out = run_ok(&args);
    let evs = events(&out);
    let epochs: Vec<_> = evs.iter().filter(|e| e["event"] == "train.epoch").collect();
    assert_eq!(epochs.len(), 2);
    assert_eq!(epochs[0]["epoch"], 1);
    assert_eq!(evs.last().unwrap()["event"], "train.done");
    assert_eq!(evs.last().unwrap()["stop_reason"], "max_epochs");
    assert!(run.join("model_seed101.ckpt").is_file());
    assert!(run.join("history_seed101.jsonl").is_file());
    assert!(run.join("config.resolved").is_file());

    // eval follows the checkpoint and writes per-seed metrics plus the mean
    let out = run_ok(&["eval", "--prep", prep_s, "--run", run_s, "--seeds", "101"]);
    let evs = events(&out);
    assert_eq!(evs[0]["event"], "eval.done");
    assert_eq!(evs.last().unwrap()["event"], "eval.mean");
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("metrics_seed101.json")).unwrap())
            .unwrap();
    for key in ["sens", "spec", "f1_weighted", "auroc", "auprc"] {
        assert!(metrics.get(key).is_some(), "metrics missing {key}");
    }
    assert!(run.join("metrics_mean.json").is_file());

    // predict on one control subject
    let ckpt = run.join("model_seed101.ckpt");
    let input = raw.join("nsr000.csv");
    let out = run_ok(&[
        "predict",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--input",
        input.to_str().unwrap(),
    ]);
    let evs = events(&out);
    let p = evs.last().unwrap()["p_event"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&p));
    assert_eq!(evs.last().unwrap()["subject_id"], "nsr000");
}

#[test]
fn synth_af_zero_gives_control_only_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw");
    run_ok(&[
        "synth",
        "--nsr",
        "3",
        "--af",
        "0",
        "--out",
        raw.to_str().unwrap(),
        "--set",
        "synth.control_duration_s=7200",
    ]);
    assert_eq!(count_csvs(&raw), 3);
    let manifest = std::fs::read_to_string(raw.join("manifest.json")).unwrap();
    assert!(!manifest.contains("af0"), "no event subjects expected");
}

#[test]
fn errors_are_machine_readable() {
    let err = run_err(&[
        "predict",
        "--ckpt",
        "/nonexistent.ckpt",
        "--input",
        "/nonexistent.csv",
    ]);
    assert_eq!(err["error"]["kind"], "io");
    assert!(err["error"]["message"]
        .as_str()
        .unwrap()
        .contains("/nonexistent"));

    let err = run_err(&["complexity", "--set", "model.widht=3"]);
    assert_eq!(err["error"]["kind"], "config");

    let err = run_err(&["complexity", "--set", "model.head_dims=4,2"]);
    assert_eq!(
        err["error"]["kind"], "config",
        "head width must match 2x tcn channels"
    );

    let dir = tempfile::tempdir().unwrap();
    let err = run_err(&[
        "eval",
        "--prep",
        dir.path().to_str().unwrap(),
        "--run",
        dir.path().to_str().unwrap(),
        "--seeds",
        "101",
    ]);
    assert_eq!(
        err["error"]["kind"], "io",
        "missing cache reported as io error"
    );
}

#[test]
fn complexity_prints_totals_and_reference() {
    let out = run_ok(&["complexity"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("layer"), "{text}");
    assert!(text.contains("total"), "{text}");
    assert!(
        text.contains("reference totals: 73500 params / 38300000 FLOPs"),
        "reference line missing:\n{text}"
    );

    let out = run_ok(&["complexity", "--json", "--set", "model.d_state=4"]);
    let report: serde_json::Value =
        serde_json::from_str(&String::from_utf8_lossy(&out.stdout)).unwrap();
    assert!(report["total_params"].as_u64().unwrap() > 0);
}
