use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hybnn_cli::metrics::{read_metrics, METRICS_HEADER};

fn mnist_dir() -> PathBuf {
    std::env::var_os("HYBNN_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

fn scratch(name: &str) -> PathBuf {
    let d = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn hybnn(out: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_hybnn"));
    cmd.args(args).arg("--out").arg(out).arg("--mnist").arg(mnist_dir());
    cmd.output().expect("spawn hybnn")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = hybnn(out, args);
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(o.status.success(), "hybnn {args:?} failed: {stderr}");
    String::from_utf8(o.stdout).unwrap()
}

#[test]
fn tiny_pipeline_through_every_subcommand() {
    let out = scratch("pipeline");
    let small = ["--task", "1", "--set", "vae_train_limit=256", "--set", "task_train_limit=300"];
    let with = |extra: &[&'static str]| -> Vec<&str> { [&small[..], extra].concat() };

    ok(&out, &with(&["train-vae", "--epochs", "1"]));
    assert!(out.join("vae/vae.ckpt").is_file());

    let s = ok(&out, &with(&["extract"]));
    assert!(s.contains("25 bytes per code"), "{s}");
    assert!(out.join("features/task1-train.hybf").is_file());

    let s = ok(&out, &with(&["train-bnn", "--epochs", "2"]));
    assert!(s.contains("packed engine mismatches 0"), "{s}");
    for f in ["bnn.ckpt", "bnn.hybp", "sizes.csv", "engine.csv", "metrics.csv", "timings.csv", "config.txt"] {
        assert!(out.join("bnn-task1").join(f).is_file(), "missing {f}");
    }
    let metrics = std::fs::read_to_string(out.join("bnn-task1/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next(), Some(METRICS_HEADER));
    let rows = read_metrics(&out.join("bnn-task1/metrics.csv")).unwrap();
    assert_eq!(rows.len(), 4, "train and test row per epoch");
    assert!(rows.iter().all(|r| r.run_id == "bnn-task1-seed0" && r.task == 1));

    ok(&out, &with(&["federated", "--rounds", "2", "--clients", "2", "--epochs", "1"]));
    let comm = std::fs::read_to_string(out.join("federated-task1/comm.csv")).unwrap();
    assert_eq!(comm.lines().count(), 3);

    let s = ok(&out, &with(&["report"]));
    assert!(s.contains("missing"), "baseline was never run: {s}");
    assert!(out.join("report.csv").is_file());
}

#[test]
fn missing_data_is_a_clear_error() {
    let out = scratch("nodata");
    let o = Command::new(env!("CARGO_BIN_EXE_hybnn"))
        .args(["train-vae", "--mnist"])
        .arg(out.join("nowhere"))
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("missing MNIST file"), "{err}");
}

#[test]
fn stages_out_of_order_explain_the_prerequisite() {
    let out = scratch("order");
    let o = hybnn(&out, &["train-bnn"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("run `hybnn extract` first"));
}

#[test]
fn bad_overrides_are_rejected() {
    let out = scratch("badset");
    for args in [&["train-bnn", "--set", "nonsense=1"][..], &["train-bnn", "--task", "9"], &["train-bnn", "--set", "bnn_lr"]] {
        let o = hybnn(&out, args);
        assert!(!o.status.success(), "{args:?} should fail");
    }
}
