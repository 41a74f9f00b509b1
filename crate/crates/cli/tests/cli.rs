use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dcco(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcco"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("DCCO_OUTPUT_ROOT")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const QUICK: &[&str] = &["--set", "rounds=4", "--set", "probe.steps=20", "--set", "final_probes=[\"linear\"]"];

fn pretrain(preset: &str, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["pretrain", "--preset", preset, "--out", out.to_str().unwrap()];
    args.extend_from_slice(QUICK);
    args.extend_from_slice(extra);
    dcco(&args)
}

#[test]
fn verify_equivalence_exit_codes() {
    let ok = dcco(&["verify-equivalence", "--trials", "10"]);
    assert_eq!(code(&ok), 0, "{}", stderr(&ok));
    let stdout = String::from_utf8_lossy(&ok.stdout);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("trial")).count(), 10);
    assert!(stdout.contains("N_k=["));
    assert_eq!(code(&dcco(&["verify-equivalence", "--trials", "10", "--tolerance", "0"])), 1);
    assert_eq!(code(&dcco(&["verify-equivalence", "--trials", "0"])), 2);
}

#[test]
fn smoke_preset_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let res = pretrain("table1-noniid-1spc", &out, &[]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    for f in ["config.toml", "metrics.jsonl", "timing.jsonl", "model.params", "report.json"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    assert!(out.join("checkpoints/round-000004.ckpt").is_file());
    assert!(out.join("probes/round-000004.json").is_file());
    let metrics = fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 4);
    let report: serde_json::Value = serde_json::from_slice(&res.stdout).unwrap();
    assert_eq!(report["method"], "dcco");

    let probe = dcco(&["probe", out.to_str().unwrap(), "--protocol", "linear", "--set", "probe.steps=10"]);
    assert_eq!(code(&probe), 0, "{}", stderr(&probe));
    let eval: serde_json::Value = serde_json::from_slice(&probe.stdout).unwrap();
    assert!(eval["accuracy"].as_f64().is_some());

    let csv = dir.path().join("plot.csv");
    let export = dcco(&["export-plot", out.join("metrics.jsonl").to_str().unwrap(), csv.to_str().unwrap()]);
    assert_eq!(code(&export), 0, "{}", stderr(&export));
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().next(), Some("round,loss,lr,probe_accuracy"));
    assert_eq!(text.lines().count(), 5);
}

#[test]
fn fedavg_with_one_sample_per_client_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let res = pretrain("table1-noniid-1spc", &dir.path().join("x"), &["--set", "method=fedavg_cco"]);
    assert_eq!(code(&res), 2);
    assert!(stderr(&res).contains("partition.samples_per_client"), "{}", stderr(&res));
    assert!(!dir.path().join("x").exists());
}

#[test]
fn invalid_values_are_rejected_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let res = pretrain("toy-trend", &out, &["--set", "round.bogus=1"]);
    assert_eq!(code(&res), 2);
    assert!(stderr(&res).contains("bogus"));
    let res = pretrain("toy-trend", &out, &["--set", "round.local_lr=-1"]);
    assert_eq!(code(&res), 2);
    assert!(stderr(&res).contains("local_lr"), "{}", stderr(&res));
    let res = dcco(&["pretrain", "--preset", "no-such-preset"]);
    assert_eq!(code(&res), 2);
}

#[test]
fn missing_files_are_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.toml");
    assert_eq!(code(&dcco(&["pretrain", "--config", missing.to_str().unwrap()])), 3);
    let csv = dir.path().join("o.csv");
    assert_eq!(code(&dcco(&["export-plot", missing.to_str().unwrap(), csv.to_str().unwrap()])), 3);
}

#[test]
fn export_plot_edge_cases() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let csv = dir.path().join("o.csv");
    assert_eq!(code(&dcco(&["export-plot", empty.to_str().unwrap(), csv.to_str().unwrap()])), 0);
    assert_eq!(fs::read_to_string(&csv).unwrap(), "round,loss,lr,probe_accuracy\n");

    let bad = dir.path().join("bad.jsonl");
    fs::write(&bad, "{\"round\":0,\"loss\":1.0,\"lr\":0.1,\"probe_accuracy\":null,\"messages\":4,\"attempts\":1}\nnot json\n").unwrap();
    let res = dcco(&["export-plot", bad.to_str().unwrap(), csv.to_str().unwrap()]);
    assert_eq!(code(&res), 2);
    assert!(stderr(&res).contains("bad.jsonl:2"), "{}", stderr(&res));
}

#[test]
fn output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["pretrain", "--preset", "table2-16cpr"];
    args.extend_from_slice(QUICK);
    let res = Command::new(env!("CARGO_BIN_EXE_dcco"))
        .args(&args)
        .env("DCCO_OUTPUT_ROOT", dir.path())
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    assert!(dir.path().join("table2-16cpr/report.json").is_file());
}

#[test]
fn partition_inspect_reports_single_class_clients() {
    let res = dcco(&["partition-inspect", "--preset", "table1-noniid-4spc"]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let report: serde_json::Value = serde_json::from_slice(&res.stdout).unwrap();
    assert_eq!(report["single_class_fraction"], 1.0);
    assert_eq!(report["num_clients"], 500);
    assert!(report["clients"].as_array().unwrap().is_empty());
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let every = ["--set", "checkpoint_every=2", "--set", "probe_every=2"];
    let full = dir.path().join("full");
    assert_eq!(code(&pretrain("toy-trend", &full, &every)), 0);

    let cut = dir.path().join("cut");
    assert_eq!(code(&pretrain("toy-trend", &cut, &every)), 0);
    // pretend the process died after round 3: the last checkpoint is at 2
    for f in ["checkpoints/round-000004.ckpt", "probes/round-000004.json", "model.params", "report.json"] {
        fs::remove_file(cut.join(f)).unwrap();
    }
    let metrics = fs::read_to_string(cut.join("metrics.jsonl")).unwrap();
    let partial: String = metrics.lines().take(3).map(|l| format!("{l}\n")).collect::<String>() + "{\"round\":3,\"lo";
    fs::write(cut.join("metrics.jsonl"), partial).unwrap();

    let res = pretrain("toy-trend", &cut, &[&every[..], &["--resume", "--workers", "2"]].concat());
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    for f in ["model.params", "metrics.jsonl", "probes/round-000004.json", "checkpoints/round-000004.ckpt"] {
        assert_eq!(fs::read(full.join(f)).unwrap(), fs::read(cut.join(f)).unwrap(), "{f} differs");
    }
}
