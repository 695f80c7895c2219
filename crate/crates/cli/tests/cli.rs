use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn data_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

fn dpap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpap"))
        .args(args)
        .env("DPAP_DATA", data_root())
        .output()
        .expect("spawn dpap")
}

const SMALL: &[&str] = &[
    "--topology",
    "Input-4C3-AvgPool2-8C3-AvgPool2-Flatten-20FC-10FC",
    "--train-size",
    "100",
    "--test-size",
    "50",
    "--time-steps",
    "4",
    "--record-wall-time",
    "false",
    "--set",
    "eval_batch_size=25",
];

fn train(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--out", out.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    dpap(&args)
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        o.status,
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn train_writes_metrics_config_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    ok(&train(&out, &["--epochs", "2", "--checkpoint-every", "1"]));
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "epoch,train_loss,test_acc,retained_params,pruning_rate,pruned_synapses,pruned_neurons,theta_mean,wall_ms"
    );
    assert_eq!(lines.count(), 3);
    for f in ["config.toml", "summary.json", "epoch-1.ckpt", "epoch-2.ckpt", "final.ckpt"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let cfg = fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(cfg.contains("train_size = 100"));

    let report = dpap(&["report", out.to_str().unwrap()]);
    ok(&report);
    assert!(String::from_utf8_lossy(&report.stdout).contains("final accuracy"));
}

#[test]
fn resumed_run_matches_straight_run() {
    let dir = tempfile::tempdir().unwrap();
    let straight = dir.path().join("straight");
    let part = dir.path().join("part");
    let resumed = dir.path().join("resumed");
    ok(&train(&straight, &["--epochs", "3"]));
    ok(&train(&part, &["--epochs", "1"]));
    let ckpt = part.join("final.ckpt");
    ok(&train(&resumed, &["--epochs", "3", "--resume", ckpt.to_str().unwrap()]));
    assert_eq!(
        fs::read(straight.join("metrics.csv")).unwrap(),
        fs::read(resumed.join("metrics.csv")).unwrap()
    );
}

#[test]
fn config_file_and_flags_combine() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    fs::write(&cfg, "epochs = 1\ndpap = false\nseed = 3\n").unwrap();
    let out = dir.path().join("run");
    let mut args = vec!["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    ok(&dpap(&args));
    let written = fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(written.contains("seed = 3") && written.contains("dpap = false"));
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn bad_configuration_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = train(&out, &["--set", "no_such_key=1"]);
    assert!(!o.status.success());
    let o = train(&out, &["--epsilon", "2.5"]);
    assert!(!o.status.success());
    assert!(!String::from_utf8_lossy(&o.stderr).is_empty());
    let o = dpap(&["report", dir.path().join("missing").to_str().unwrap()]);
    assert!(!o.status.success());
}

#[test]
fn compare_and_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&train(&a, &["--epochs", "2", "--dpap", "false"]));
    ok(&train(&b, &["--epochs", "2"]));
    let o = dpap(&["compare", a.to_str().unwrap(), b.to_str().unwrap()]);
    ok(&o);
    assert!(String::from_utf8_lossy(&o.stdout).contains("speedup"));

    let sweep = dir.path().join("sweep");
    let mut args = vec![
        "sweep",
        "--out",
        sweep.to_str().unwrap(),
        "--epsilons",
        "0.5,1.5",
        "--etas",
        "25",
        "--epochs",
        "1",
    ];
    args.extend_from_slice(SMALL);
    let o = dpap(&args);
    ok(&o);
    assert!(sweep.join("sweep.txt").exists() && sweep.join("sweep.json").exists());
    assert!(String::from_utf8_lossy(&o.stdout).contains("eta 25"));
}
