use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mvbigan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvbigan")).args(args).output().unwrap()
}

fn tiny_train(out: &Path) -> Output {
    mvbigan(&[
        "train",
        "--task",
        "synthetic",
        "--seed",
        "3",
        "--out",
        out.to_str().unwrap(),
        "--set",
        "train.epochs=2",
        "--set",
        "task.train_size=32",
        "--set",
        "train.batch_size=16",
        "--set",
        "arch.latent_dim=2",
    ])
}

fn without_wall_clock(text: &str) -> Vec<String> {
    text.lines()
        .map(|l| l.rsplit_once('\t').map_or(l, |(head, _)| head).to_string())
        .collect()
}

#[test]
fn training_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = tiny_train(out);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let log = |d: &Path| without_wall_clock(&fs::read_to_string(d.join("metrics.tsv")).unwrap());
    assert_eq!(log(&a), log(&b));
    assert_eq!(log(&a).len(), 3);
    let draw = |d: &Path| mvbigan(&["sample", "--checkpoint", d.join("final.ckpt").to_str().unwrap(), "--m", "4"]).stdout;
    assert_eq!(draw(&a), draw(&b));
    let config = fs::read_to_string(a.join("config.txt")).unwrap();
    assert!(config.contains("train.seed = 3"));
    assert!(config.contains("arch.latent_dim = 2"));

    let ckpt = a.join("final.ckpt");
    let report = mvbigan(&["eval-synthetic", "--checkpoint", ckpt.to_str().unwrap(), "--n-eval", "1", "--m", "8"]);
    assert!(report.status.success());
    assert!(String::from_utf8_lossy(&report.stdout).contains("orthogonal_ratio"));
    let samples = mvbigan(&["sample", "--checkpoint", ckpt.to_str().unwrap(), "--mask", "10", "--m", "3"]);
    assert!(samples.status.success());
    let text = String::from_utf8_lossy(&samples.stdout).into_owned();
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().all(|l| l.split('\t').count() == 2));
}

#[test]
fn resume_extends_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    assert!(tiny_train(&out).status.success());
    let ckpt = out.join("final.ckpt");
    let o = mvbigan(&["train", "--resume", ckpt.to_str().unwrap(), "--set", "train.epochs=3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(out.join("metrics.tsv")).unwrap().lines().count(), 4);
    let bad = mvbigan(&["train", "--resume", ckpt.to_str().unwrap(), "--set", "train.lr=1"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn inspect_data_prints_dims() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("labels-idx1-ubyte");
    fs::write(&path, [0u8, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0, 1, 1, 2, 3, 4, 5, 6]).unwrap();
    let o = mvbigan(&["inspect-data", "--idx", path.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), "dims 2x3x1");

    fs::write(&path, [0u8, 0, 9, 1, 0, 0, 0, 1, 7]).unwrap();
    assert_eq!(mvbigan(&["inspect-data", "--idx", path.to_str().unwrap()]).status.code(), Some(2));
    let missing = dir.path().join("nope");
    assert_eq!(mvbigan(&["inspect-data", "--idx", missing.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(mvbigan(&["train", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(mvbigan(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(mvbigan(&["train", "--set", "train.bogus=1"]).status.code(), Some(1));
    assert_eq!(mvbigan(&["train", "--set", "novalue"]).status.code(), Some(1));
    let help = mvbigan(&["train", "--help"]);
    assert_eq!(help.status.code(), Some(0));
    let text = String::from_utf8_lossy(&help.stdout);
    assert!(text.contains("train.lr = "));
    assert!(text.contains("train.epochs = 30"));
}

#[test]
fn corrupt_checkpoint_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.ckpt");
    fs::write(&path, b"MVBIGAN\0garbage").unwrap();
    let o = mvbigan(&["eval-synthetic", "--checkpoint", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}
