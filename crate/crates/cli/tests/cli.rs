//! End-to-end tests of the `pcdeq` binary: exit codes, config-file
//! precedence, and output contracts.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_pcdeq")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).env_remove("PCDEQ_DATA_DIR").output().expect("binary runs")
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .current_dir(dir)
        .env_remove("PCDEQ_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

#[test]
fn no_subcommand_is_a_usage_error() {
    assert_eq!(code(&run(&[])), 2);
}

#[test]
fn unknown_flag_is_a_usage_error() {
    assert_eq!(code(&run(&["train", "--no-such-flag"])), 2);
}

#[test]
fn bad_arch_name_is_a_usage_error() {
    let out = run(&["train", "--arch", "resnet", "--synthetic"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("resnet"));
}

#[test]
fn variant_activation_mismatch_is_a_usage_error() {
    let out = run(&["train", "--arch", "pcdeq2-l", "--act", "relu6", "--synthetic"]);
    assert_eq!(code(&out), 2);
    let out = run(&["train", "--arch", "pcdeq2-l", "--act", "tanh", "--synthetic"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn variant_flag_must_agree_with_arch() {
    let out = run(&["train", "--arch", "pcdeq1-l", "--variant", "2", "--synthetic"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn missing_data_source_is_a_usage_error() {
    let out = run(&["train", "--epochs", "1"]);
    assert_eq!(code(&out), 2);
    let out = run(&["eval", "--checkpoint", "/nonexistent.pcdq"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn unreadable_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let bogus = dir.path().join("bogus.pcdq");
    std::fs::write(&bogus, b"not a checkpoint").unwrap();
    let out = run(&["eval", "--checkpoint", bogus.to_str().unwrap(), "--synthetic"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn verify_zero_samples_is_a_usage_error() {
    assert_eq!(code(&run(&["verify", "--samples", "0"])), 2);
}

#[test]
fn verify_passes_and_self_test_keeps_exit_zero() {
    let out = run(&["verify", "--samples", "60", "--self-test", "--seed", "3"]);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("verdict=pass"));
    assert!(stdout.contains("expected=fail"));
    // Every non-selftest line passes.
    for line in stdout.lines().filter(|l| l.starts_with("property=") && !l.contains("selftest")) {
        assert!(line.contains("verdict=pass"), "{line}");
    }
}

#[test]
fn train_eval_roundtrip_on_synthetic_data() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("log.csv");
    let ckpt = dir.path().join("model.pcdq");
    let out = run(&[
        "train",
        "--synthetic",
        "--epochs",
        "2",
        "--seed",
        "5",
        "--out",
        csv.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("final test accuracy"));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("epoch,train_loss,test_acc,fwd_iters_mean,bwd_iters_mean,spectral_norm,lr"));
    assert_eq!(text.lines().count(), 3);

    // Evaluation of the saved checkpoint reproduces the logged accuracy.
    let logged: f64 = text.lines().last().unwrap().split(',').nth(2).unwrap().parse().unwrap();
    let out = run(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--synthetic", "--seed", "5"]);
    assert_eq!(code(&out), 0);
    let printed: f64 = String::from_utf8_lossy(&out.stdout).trim().parse().unwrap();
    assert!((printed - logged).abs() < 5e-5, "eval {printed} vs logged {logged}");
}

#[test]
fn identical_invocations_produce_bitwise_identical_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let args_for = |tag: &str, dir: &Path| -> Vec<String> {
        vec![
            "train".into(),
            "--synthetic".into(),
            "--epochs".into(),
            "3".into(),
            "--seed".into(),
            "7".into(),
            "--out".into(),
            dir.join(format!("{tag}.csv")).to_str().unwrap().into(),
            "--checkpoint".into(),
            dir.join(format!("{tag}.pcdq")).to_str().unwrap().into(),
        ]
    };
    for tag in ["a", "b"] {
        let args: Vec<String> = args_for(tag, dir.path());
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        assert_eq!(code(&run(&refs)), 0);
    }
    let a = std::fs::read(dir.path().join("a.csv")).unwrap();
    let b = std::fs::read(dir.path().join("b.csv")).unwrap();
    assert_eq!(a, b, "training CSVs differ between identical runs");
    let a = std::fs::read(dir.path().join("a.pcdq")).unwrap();
    let b = std::fs::read(dir.path().join("b.pcdq")).unwrap();
    assert_eq!(a, b, "checkpoints differ between identical runs");
}

#[test]
fn diagnose_writes_the_exact_csv_header() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("diag.csv");
    let out = run(&[
        "diagnose",
        "--synthetic",
        "--batches",
        "5",
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&out_path).unwrap();
    assert_eq!(text.lines().next().unwrap(), "batch,fwd_iters,bwd_iters");
    assert_eq!(text.lines().count(), 6);
    assert!(String::from_utf8_lossy(&out.stdout).contains("spectral_norm="));
}

#[test]
fn config_file_fills_defaults_and_flags_override_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "epochs = 1\nseed = 11\nbatch-size = 32\n").unwrap();
    let csv = dir.path().join("log.csv");
    let out = run_in(
        dir.path(),
        &[
            "train",
            "--synthetic",
            "--config",
            cfg.to_str().unwrap(),
            "--epochs",
            "2",
            "--out",
            csv.to_str().unwrap(),
        ],
    );
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    // Flag beats file: 2 epochs, not 1.
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn unknown_config_key_is_rejected_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "epochs = 1\nlearning_rate = 0.1\n").unwrap();
    let out = run(&["train", "--synthetic", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn data_dir_env_var_is_the_fallback() {
    // Missing both flag and env: usage error. With a bogus env dir: runtime error.
    let out = Command::new(bin())
        .args(["train", "--epochs", "1"])
        .env("PCDEQ_DATA_DIR", "/definitely/not/a/real/dir")
        .output()
        .unwrap();
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("train-images"));
}

#[test]
fn synthetic_one_epoch_finishes_quickly() {
    let dir = tempfile::tempdir().unwrap();
    let start = std::time::Instant::now();
    let out = run_in(dir.path(), &["train", "--synthetic", "--epochs", "1", "--seed", "2"]);
    assert_eq!(code(&out), 0);
    assert!(start.elapsed().as_secs() < 60, "took {:?}", start.elapsed());
    let csv = std::fs::read_to_string(dir.path().join("pcdeq_train.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
}
