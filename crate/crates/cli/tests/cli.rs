use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mlae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mlae")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: [&str; 8] = [
    "--set",
    "backbone.blocks=2",
    "--set",
    "train.epochs=2",
    "--set",
    "task.synthetic.n_train=64",
    "--set",
    "task.synthetic.n_test=64",
];

fn train(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--out", out.to_str().unwrap()];
    args.extend_from_slice(&SMALL);
    args.extend_from_slice(extra);
    mlae(&args)
}

#[test]
fn train_eval_merge_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("nested/run");
    let o = train(&run, &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["checkpoint.json", "checkpoint.bin", "metrics.csv", "config.json", "data/test.csv"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);

    let test = run.join("data/test.csv");
    let e = mlae(&["eval", run.to_str().unwrap(), test.to_str().unwrap()]);
    assert_eq!(code(&e), 0);
    let acc = stdout(&e).trim().to_string();
    let v: f64 = acc.parse().unwrap();
    assert!((0.0..=100.0).contains(&v));
    assert_eq!(acc.split('.').nth(1).map(str::len), Some(1));

    let merged = dir.path().join("merged.json");
    assert_eq!(code(&mlae(&["merge", run.to_str().unwrap(), merged.to_str().unwrap()])), 0);
    let e2 = mlae(&["eval", merged.to_str().unwrap(), test.to_str().unwrap()]);
    assert_eq!(stdout(&e2), stdout(&e));

    let an = dir.path().join("an");
    let a = mlae(&["analyze", run.to_str().unwrap(), "--out", an.to_str().unwrap()]);
    assert_eq!(code(&a), 0);
    for f in ["block_0.csv", "block_1.csv", "block_0.svg", "summary.csv"] {
        assert!(an.join(f).exists(), "{f}");
    }
    let a2 = mlae(&["analyze", merged.to_str().unwrap(), "--out", an.to_str().unwrap()]);
    assert_eq!(code(&a2), 2);
    assert!(String::from_utf8_lossy(&a2.stderr).contains("no adapters present"));
}

#[test]
fn same_seed_gives_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(code(&train(&a, &["--seed", "5"])), 0);
    assert_eq!(code(&train(&b, &["--seed", "5"])), 0);
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
    assert_eq!(fs::read(a.join("checkpoint.bin")).unwrap(), fs::read(b.join("checkpoint.bin")).unwrap());
}

#[test]
fn vanilla_flags_train() {
    let dir = tempfile::tempdir().unwrap();
    let o = train(
        &dir.path().join("v"),
        &["--flag", "decomposition=off", "masking=off", "adaptive=off"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let cfg = fs::read_to_string(dir.path().join("v/config.json")).unwrap();
    assert!(cfg.contains("\"decomposition\": false"));
}

#[test]
fn error_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let out = out.to_str().unwrap();
    assert_eq!(code(&mlae(&["train", "--out", out, "--set", "masking.p=1.5"])), 2);
    assert_eq!(code(&mlae(&["train", "--out", out, "--set", "adapter.rank=3"])), 2);
    assert_eq!(code(&mlae(&["train", "--out", out, "--flag", "masking=maybe"])), 2);
    assert_eq!(code(&mlae(&["train", "--config", "/nonexistent/cfg.json"])), 2);
    assert_eq!(code(&mlae(&["bogus"])), 2);

    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, "{ \"train\": { \"lr\": ").unwrap();
    assert_eq!(code(&mlae(&["train", "--config", cfg.to_str().unwrap()])), 2);

    // Unwritable output location: a regular file stands where a directory is needed.
    let blocker = dir.path().join("file");
    fs::write(&blocker, "").unwrap();
    let under = blocker.join("run");
    assert_eq!(code(&train(&under, &[])), 2);
}

#[test]
fn divergence_saves_last_good_state() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("d");
    let o = train(&run, &["--set", "train.lr=1e300"]);
    assert_eq!(code(&o), 3);
    assert!(run.join("checkpoint.json").exists());
    let test = run.join("data/test.csv");
    assert_eq!(code(&mlae(&["eval", run.to_str().unwrap(), test.to_str().unwrap()])), 0);
}

#[test]
fn corrupt_checkpoint_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("c");
    assert_eq!(code(&train(&run, &[])), 0);
    let blob = run.join("checkpoint.bin");
    let mut bytes = fs::read(&blob).unwrap();
    bytes[100] ^= 0x40;
    fs::write(&blob, bytes).unwrap();
    let test = run.join("data/test.csv");
    assert_eq!(code(&mlae(&["eval", run.to_str().unwrap(), test.to_str().unwrap()])), 4);
    assert_eq!(code(&mlae(&["merge", run.to_str().unwrap(), dir.path().join("m").to_str().unwrap()])), 4);
}

#[test]
fn eval_rejects_mismatched_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("r");
    assert_eq!(code(&train(&run, &[])), 0);
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "label,t0_0,t0_1\n1,0.5,0.25\n").unwrap();
    assert_eq!(code(&mlae(&["eval", run.to_str().unwrap(), bad.to_str().unwrap()])), 2);
    let missing = dir.path().join("none.csv");
    assert_eq!(code(&mlae(&["eval", run.to_str().unwrap(), missing.to_str().unwrap()])), 2);
}

#[test]
fn init_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg/default.json");
    assert_eq!(code(&mlae(&["init-config", "--out", cfg.to_str().unwrap()])), 0);
    let run = dir.path().join("r");
    let mut args = vec!["train", "--config", cfg.to_str().unwrap(), "--out", run.to_str().unwrap()];
    args.extend_from_slice(&SMALL);
    assert_eq!(code(&mlae(&args)), 0);
}

#[test]
fn sweep_writes_summary_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s");
    let mut args = vec!["sweep", "--axis", "p", "--values", "0,0.5", "--seeds", "0", "--out", out.to_str().unwrap()];
    args.extend_from_slice(&SMALL);
    let o = mlae(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let runs = fs::read_to_string(out.join("sweep_runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 3);
    let summary = fs::read_to_string(out.join("sweep_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    assert_eq!(code(&mlae(&args)), 0);
    assert_eq!(fs::read_to_string(out.join("sweep_runs.csv")).unwrap(), runs);
}
