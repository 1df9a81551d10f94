use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: [&str; 8] = [
    "--epochs",
    "2",
    "--n_train",
    "300",
    "--n_test",
    "120",
    "--noise_ratio",
    "0.3",
];

fn alum(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_alum"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn train(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--out", out];
    args.extend(extra);
    args.extend(SMALL);
    alum(&args, dir)
}

fn read(dir: &Path, path: &str) -> Vec<u8> {
    fs::read(dir.join(path)).unwrap()
}

#[test]
fn repeated_train_is_bitwise_identical() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        assert!(train(dir.path(), out, &[]).status.success());
    }
    for file in ["model.ckpt", "metrics.csv", "config.csv", "report.csv"] {
        assert_eq!(
            read(dir.path(), &format!("a/{file}")),
            read(dir.path(), &format!("b/{file}")),
            "{file}"
        );
    }
    let metrics = String::from_utf8(read(dir.path(), "a/metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,step,loss_total,loss_ce,loss_triplet,train_acc,test_acc,rej10,rej20,rej30,"));
    assert_eq!(metrics.lines().count(), 3);
}

#[test]
fn config_echo_replays_the_run() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train(dir.path(), "a", &["--seed", "9"]).status.success());
    let out = alum(&["train", "--out", "b", "--config", "a/config.csv"], dir.path());
    assert!(out.status.success());
    assert_eq!(read(dir.path(), "a/model.ckpt"), read(dir.path(), "b/model.ckpt"));
    assert_eq!(read(dir.path(), "a/metrics.csv"), read(dir.path(), "b/metrics.csv"));
}

#[test]
fn overrides_beat_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("run.cfg"),
        "seed = 1\nepochs = 5\n# comment\nlr = 0.01\n",
    )
    .unwrap();
    let out = alum(
        &[
            "train",
            "--out",
            "a",
            "--config",
            "run.cfg",
            "--epochs",
            "1",
            "--n-train",
            "200",
            "--n_test",
            "50",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let echo = String::from_utf8(read(dir.path(), "a/config.csv")).unwrap();
    assert!(echo.contains("epochs,1\n") && echo.contains("lr,0.01\n") && echo.contains("seed,1\n"));
    assert!(echo.contains("n_train,200\n"));
}

#[test]
fn eval_and_reject_curve_read_synth_output() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train(dir.path(), "run", &[]).status.success());
    let mut synth = vec!["synth", "--out", "data"];
    synth.extend(SMALL);
    assert!(alum(&synth, dir.path()).status.success());

    let out = alum(
        &[
            "eval",
            "--checkpoint",
            "run/model.ckpt",
            "--data",
            "data/test.csv",
            "--out",
            "eval.csv",
        ],
        dir.path(),
    );
    assert!(out.status.success());
    // the synthesized test split is the one training evaluated on
    assert_eq!(read(dir.path(), "eval.csv"), read(dir.path(), "run/report.csv"));

    let out = alum(
        &[
            "reject-curve",
            "--checkpoint",
            "run/model.ckpt",
            "--data",
            "data/test.csv",
            "--rates",
            "0,0.5",
        ],
        dir.path(),
    );
    assert!(out.status.success());
    let table = String::from_utf8(out.stdout).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(table.contains(" 60 "));
}

#[test]
fn exit_codes_follow_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| alum(args, dir.path()).status.code();
    assert_eq!(code(&["train", "--out", "x", "--no_such_key", "1"]), Some(2));
    assert_eq!(code(&["train", "--out", "x", "--lr", "fast"]), Some(2));
    assert_eq!(code(&["train", "--out", "x", "--batch_size", "1"]), Some(2));
    assert_eq!(
        code(&["eval", "--checkpoint", "missing.ckpt", "--data", "missing.csv"]),
        Some(4)
    );
    fs::write(dir.path().join("bad.ckpt"), b"not a checkpoint").unwrap();
    assert_eq!(
        code(&["eval", "--checkpoint", "bad.ckpt", "--data", "missing.csv"]),
        Some(4)
    );
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = alum(&["gradcheck", "--seeds", "2"], dir.path());
    assert!(out.status.success());
    assert!(String::from_utf8(out.stdout).unwrap().contains("over 2 seeds"));
}

#[test]
fn ablate_writes_one_row_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let out = alum(
        &[
            "ablate",
            "--out",
            "ablation.csv",
            "--seeds",
            "0",
            "--epochs",
            "1",
            "--n_train",
            "200",
            "--n_test",
            "50",
        ],
        dir.path(),
    );
    assert!(out.status.success());
    let table = String::from_utf8(read(dir.path(), "ablation.csv")).unwrap();
    assert!(table.starts_with("variant,lc,ap,an,triplet,acc,rej10,rej20,rej30\n"));
    assert_eq!(table.lines().count(), 7);
    assert!(table.contains("ALUM-5,true,true,true,true,"));
}
