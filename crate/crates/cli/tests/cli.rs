use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn gradhub(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gradhub"))
        .args(args)
        .env("RUST_BACKTRACE", "0")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = gradhub(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn gen(dir: &Path) -> String {
    let d = dir.join("data");
    let d = d.to_str().unwrap().to_string();
    ok(&["gen-data", "--files", "4", "--samples", "60", "--seq-len", "1", "--dim", "6", "--out", &d]);
    d
}

const ARCH: &str = "dense:6:8:tanh,softmax:8:3";

#[test]
fn train_writes_log_and_bundle() {
    let t = tempfile::tempdir().unwrap();
    let data = gen(t.path());
    let cfg = t.path().join("run.config");
    fs::write(&cfg, "# small run\nepochs = 3\nbatch_size = 20\n").unwrap();
    let log = t.path().join("log.jsonl");
    let out = t.path().join("out");
    let stdout = ok(&[
        "train", "--data", &data, "--config", cfg.to_str().unwrap(), "--arch", ARCH, "--workers", "2",
        "--set", "validate_every=2", "--log", log.to_str().unwrap(), "--out", out.to_str().unwrap(),
    ]);
    assert!(stdout.contains("workers=2"), "{stdout}");
    let lines = fs::read_to_string(&log).unwrap();
    assert!(lines.lines().all(|l| l.starts_with("{\"event\":")));
    assert!(lines.contains("\"final\""));
    let csv = fs::read_to_string(out.join("trajectory.csv")).unwrap();
    assert!(csv.starts_with("version,updates,samples,accuracy,loss,final\n"));
    let echoed = fs::read_to_string(out.join("trajectory.config")).unwrap();
    assert!(echoed.contains("epochs = 3") && echoed.contains("workers = 2"), "{echoed}");
}

#[test]
fn bad_input_exits_non_zero() {
    let t = tempfile::tempdir().unwrap();
    let data = gen(t.path());
    for args in [
        vec!["train", "--data", data.as_str(), "--set", "bogus=1"],
        vec!["train", "--data", data.as_str(), "--batch-size", "0"],
        vec!["train", "--data", "/nonexistent"],
        vec!["exp-speedup", "--workers", "2,4", "--out", "/tmp/never"],
    ] {
        let out = gradhub(&args);
        assert!(!out.status.success(), "{args:?} succeeded");
        assert!(!out.stderr.is_empty());
    }
}

#[test]
fn sim_and_experiments_write_csv() {
    let t = tempfile::tempdir().unwrap();
    let cm = t.path().join("cm.txt");
    fs::write(&cm, "compute_per_sample = 1\nmaster_update_cost = 50\n").unwrap();
    let report = t.path().join("sim.csv");
    ok(&["sim", "--workers", "1,2,4", "--files", "8", "--samples", "100", "--cost-model", cm.to_str().unwrap(), "--out", report.to_str().unwrap()]);
    assert!(fs::read_to_string(&report).unwrap().starts_with("workers,makespan,"));
    assert!(fs::read_to_string(t.path().join("sim.speedup.csv")).unwrap().starts_with("workers,makespan,speedup\n"));

    let exp = t.path().join("speedup");
    ok(&["exp-speedup", "--workers", "1,2", "--files", "8", "--samples", "100", "--out", exp.to_str().unwrap()]);
    assert!(fs::read_to_string(exp.join("speedup.csv")).unwrap().starts_with("workers,elapsed,speedup,final_accuracy\n"));
    assert!(exp.join("speedup.costmodel").exists() && exp.join("speedup.config").exists());

    let exp = t.path().join("batch");
    ok(&["exp-batchsize", "--batches", "10,100", "--workers", "4", "--files", "8", "--samples", "100", "--out", exp.to_str().unwrap()]);
    assert!(fs::read_to_string(exp.join("batchsize.csv")).unwrap().starts_with("batch_size,speedup,relative_speedup\n"));

    let data = gen(t.path());
    let exp = t.path().join("stale");
    let stdout = ok(&[
        "exp-staleness", "--data", &data, "--arch", ARCH, "--workers", "1,2", "--momenta", "0,0.9",
        "--set", "sample_budget=120", "--set", "batch_size=10", "--out", exp.to_str().unwrap(),
    ]);
    assert_eq!(stdout.lines().count(), 4, "{stdout}");
    let csv = fs::read_to_string(exp.join("staleness.csv")).unwrap();
    assert!(csv.starts_with("workers,momentum,trial,final_accuracy,mean_staleness,max_staleness,histogram\n"));
    assert_eq!(csv.lines().count(), 5);
}
