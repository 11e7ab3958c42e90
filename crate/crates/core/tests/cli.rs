use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--set", "model.resolution=16",
    "--set", "data.controlled_episodes=40",
    "--set", "training.epochs=1",
    "--set", "training.batch_size=8",
    "--set", "training.max_batches_per_epoch=2",
    "--set", "training.eval_batches=1",
    "--set", "evaluation.pool_size=40",
    "--set", "evaluation.queries=10",
    "--set", "planning.candidates=10",
    "--set", "planning.episodes=2",
];

fn cdr(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cdr"))
        .current_dir(dir)
        .env_remove("CDR_CONFIG")
        .args(args)
        .args(SMALL)
        .output()
        .unwrap()
}

fn stderr_lines(o: &Output) -> Vec<String> {
    String::from_utf8_lossy(&o.stderr).lines().map(str::to_string).collect()
}

#[test]
fn invalid_loss_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = cdr(dir.path(), &["train", "--loss", "contrastive", "--dataset", "d", "--out", "c"]);
    assert_eq!(o.status.code(), Some(2));
    let lines = stderr_lines(&o);
    assert_eq!(lines.len(), 1, "{lines:?}");
    assert!(lines[0].starts_with("error kind=usage"), "{}", lines[0]);
}

#[test]
fn missing_file_is_reported_on_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let o = cdr(dir.path(), &["eval-invariance", "--checkpoint", "absent.ckpt"]);
    assert_eq!(o.status.code(), Some(1));
    let lines = stderr_lines(&o);
    assert_eq!(lines.len(), 1);
    assert!(lines[0].starts_with("error kind=io"), "{}", lines[0]);
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = cdr(dir.path(), &["--set", "training.epoch=3", "prop1", "--regime", "indep", "--trials", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr_lines(&o)[0].starts_with("error kind=config"));
}

#[test]
fn small_pipeline_runs_and_checks_hashes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let gen = cdr(d, &["gen-data", "--paradigm", "controlled", "--out", "train.cdrd"]);
    assert!(gen.status.success(), "{:?}", stderr_lines(&gen));
    let test = cdr(d, &["gen-data", "--paradigm", "controlled", "--split", "test", "--episodes", "20", "--out", "test.cdrd"]);
    assert!(test.status.success());
    let queries = cdr(d, &["gen-data", "--paradigm", "controlled", "--split", "test", "--episodes", "10", "--seed-offset", "1000", "--out", "q.cdrd"]);
    assert!(queries.status.success());

    let train = cdr(d, &["train", "--loss", "cdr", "--dataset", "train.cdrd", "--out", "cdr.ckpt"]);
    assert!(train.status.success(), "{:?}", stderr_lines(&train));
    let metrics = std::fs::read_to_string(d.join("cdr.ckpt.metrics")).unwrap();
    assert!(metrics.starts_with("config_hash="));
    assert!(metrics.contains("epoch=1 split=val"));

    let inv = cdr(d, &["eval-invariance", "--checkpoint", "cdr.ckpt", "--pairs", "8"]);
    assert!(inv.status.success(), "{:?}", stderr_lines(&inv));
    assert!(String::from_utf8_lossy(&inv.stdout).contains("invariance cos_mean="));

    let ret = cdr(d, &["eval-retrieval", "--checkpoint", "cdr.ckpt", "--pool", "test.cdrd", "--queries", "q.cdrd", "--split", "ood"]);
    assert!(ret.status.success(), "{:?}", stderr_lines(&ret));
    assert!(String::from_utf8_lossy(&ret.stdout).contains("retrieval split=ood"));

    let plan = cdr(d, &["plan", "--checkpoint", "cdr.ckpt", "--goal-domain", "different"]);
    assert!(plan.status.success(), "{:?}", stderr_lines(&plan));

    // a changed config no longer matches the checkpoint's recorded hash
    let mismatch = cdr(d, &["--set", "seed=5", "eval-invariance", "--checkpoint", "cdr.ckpt", "--pairs", "8"]);
    assert_eq!(mismatch.status.code(), Some(1));
    assert!(stderr_lines(&mismatch)[0].starts_with("error kind=hash_mismatch"));
    let forced = cdr(d, &["--set", "seed=5", "--allow-hash-mismatch", "eval-invariance", "--checkpoint", "cdr.ckpt", "--pairs", "8"]);
    assert!(forced.status.success());

    // pool and queries drawn from the same episodes are refused
    let overlap = cdr(d, &["eval-retrieval", "--checkpoint", "cdr.ckpt", "--pool", "test.cdrd", "--queries", "test.cdrd", "--split", "in"]);
    assert_eq!(overlap.status.code(), Some(2));
}
