//! End-to-end runs of the binary: artifacts on disk, exit codes, determinism.

use std::path::Path;
use std::process::{Command, Output};

fn ranet(args: &[&str], out_dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ranet"))
        .args(args)
        .env("RANET_OUT_DIR", out_dir)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn flops_table_is_monotone() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = assert_ok(&ranet(&["flops", "--config", "model-c-1"], dir.path()));
    let macs: Vec<u64> = stdout
        .lines()
        .filter_map(|l| {
            let mut it = l.split_whitespace();
            let a = it.next()?.parse::<u64>().ok()?;
            let b = it.next()?.parse::<u64>().ok()?;
            let _ = a;
            Some(b)
        })
        .collect();
    assert_eq!(macs.len(), 6);
    for w in macs.windows(2) {
        assert!(w[0] < w[1], "non-monotone: {:?}", macs);
    }
}

#[test]
fn unknown_verb_and_bad_config_fail_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    assert!(!ranet(&["frobnicate"], dir.path()).status.success());
    assert!(!ranet(&["flops", "--config", "no-such-preset"], dir.path()).status.success());
}

#[test]
fn eval_without_checkpoint_fails_fast() {
    let dir = tempfile::tempdir().unwrap();
    let out = ranet(
        &["eval-anytime", "--checkpoint", "/nonexistent/ckpt.bin"],
        dir.path(),
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn export_graph_writes_layer_table_and_config() {
    let dir = tempfile::tempdir().unwrap();
    assert_ok(&ranet(&["export-graph", "--config", "mini"], dir.path()));
    let graph = std::fs::read_to_string(dir.path().join("graph.txt")).unwrap();
    assert!(graph.contains("classifiers"));
    assert!(dir.path().join("config.toml").exists());
}

fn train_args<'a>(out: &'a str) -> Vec<&'a str> {
    vec![
        "train",
        "--config",
        "mini",
        "--epochs",
        "2",
        "--batch-size",
        "8",
        "--train-per-class",
        "8",
        "--eval-per-class",
        "4",
        "--difficulty",
        "0.2",
        "--no-augment",
        "--seed",
        "7",
        "--out",
        out,
    ]
}

#[test]
fn train_then_eval_verbs_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    let (sa, sb) = (out_a.to_str().unwrap().to_owned(), out_b.to_str().unwrap().to_owned());
    assert_ok(&ranet(&train_args(&sa), dir.path()));
    assert_ok(&ranet(&train_args(&sb), dir.path()));

    // identical seeds give byte-identical checkpoints and reports
    for name in ["checkpoint.bin", "train_log.csv", "anytime_test.csv"] {
        let a = std::fs::read(out_a.join(name)).unwrap();
        let b = std::fs::read(out_b.join(name)).unwrap();
        assert_eq!(a, b, "{} differs between identical runs", name);
    }

    let ckpt = out_a.join("checkpoint.bin");
    let ckpt_s = ckpt.to_str().unwrap();

    let eval_dir = dir.path().join("eval");
    let stdout = assert_ok(&ranet(
        &[
            "eval-anytime",
            "--checkpoint",
            ckpt_s,
            "--eval-per-class",
            "4",
            "--difficulty",
            "0.2",
            "--seed",
            "7",
            "--out",
            eval_dir.to_str().unwrap(),
        ],
        dir.path(),
    ));
    assert!(stdout.starts_with("classifier,macs,accuracy"));
    assert!(eval_dir.join("anytime.csv").exists());

    let budg_dir = dir.path().join("budg");
    let stdout = assert_ok(&ranet(
        &[
            "eval-budgeted",
            "--checkpoint",
            ckpt_s,
            "--eval-per-class",
            "4",
            "--difficulty",
            "0.2",
            "--seed",
            "7",
            "--budgets",
            "0.9,1.0",
            "--out",
            budg_dir.to_str().unwrap(),
        ],
        dir.path(),
    ));
    assert!(stdout.contains("epsilon"));
    let csv = std::fs::read_to_string(budg_dir.join("budgeted.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);

    let cal_dir = dir.path().join("cal");
    assert_ok(&ranet(
        &[
            "calibrate",
            "--checkpoint",
            ckpt_s,
            "--eval-per-class",
            "4",
            "--difficulty",
            "0.2",
            "--seed",
            "7",
            "--budgets",
            "1.0",
            "--out",
            cal_dir.to_str().unwrap(),
        ],
        dir.path(),
    ));
    assert!(cal_dir.join("calibration.csv").exists());
}

#[test]
fn failed_train_leaves_no_partial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("fail");
    let s = out.to_str().unwrap().to_owned();
    // milestone beyond the last epoch violates the train-config invariants
    let mut args = train_args(&s);
    args.extend(["--lr-milestones", "99"]);
    let res = ranet(&args, dir.path());
    assert!(!res.status.success());
    assert!(!out.join("checkpoint.bin").exists());
}
