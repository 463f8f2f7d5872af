//! End-to-end runs of the command-line tool.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
n = 5
seeds = [3]
[arch]
embed_dim = 8
heads = 2
layers = 1
[train]
batch_size = 4
instances_per_epoch = 8
num_starts = 3
lr = 1e-3
track_greedy = false
epochs = 2
[federation]
rounds = 2
local_epochs = 1
local_lr = 1e-3
aggregation = "ties"
[eval]
set_size = 3
budget = 100
"#;

fn fedroute(args: &[&str], dir: &Path, threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fedroute"));
    cmd.args(args).current_dir(dir);
    match threads {
        Some(t) => cmd.env("FEDROUTE_THREADS", t),
        None => cmd.env_remove("FEDROUTE_THREADS"),
    };
    cmd.output().unwrap()
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn pipeline(dir: &Path, threads: &str) {
    fs::write(dir.join("c.toml"), TINY).unwrap();
    let common = ["--config", "c.toml", "--seed", "3", "--out", "runs"];
    ok(fedroute(&[&["pretrain"], &common[..]].concat(), dir, Some(threads)));
    ok(fedroute(&[&["finetune", "--mode", "fl"], &common[..]].concat(), dir, Some(threads)));
    ok(fedroute(&[&["finetune", "--mode", "cpl"], &common[..]].concat(), dir, Some(threads)));
    ok(fedroute(&[&["evaluate"], &common[..]].concat(), dir, Some(threads)));
}

#[test]
fn metrics_identical_across_thread_counts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path(), "1");
    pipeline(b.path(), "4");
    for rel in [
        "runs/pretrain/seed3/metrics.csv",
        "runs/fl/seed3/metrics.csv",
        "runs/fl/seed3/rollup.csv",
        "runs/cpl/seed3/metrics.csv",
        "runs/metrics/seed3/metrics.csv",
        "runs/metrics/seed3/rollup.csv",
        "runs/fl/seed3/fl_client4.ckpt",
    ] {
        let x = fs::read(a.path().join(rel)).unwrap();
        let y = fs::read(b.path().join(rel)).unwrap();
        assert_eq!(x, y, "{rel} differs");
    }
    let rollup = fs::read_to_string(a.path().join("runs/metrics/seed3/rollup.csv")).unwrap();
    // pretrain + cpl + fl rows, 10 each
    assert_eq!(rollup.lines().count(), 31);
    let rounds = fs::read_dir(a.path().join("runs/fl/seed3/rounds")).unwrap().count();
    assert_eq!(rounds, 2 * 10);
    let log = fs::read_to_string(a.path().join("runs/fl/seed3/round_log.csv")).unwrap();
    assert!(log.starts_with("round,client_id,variant,trained_greedy_cost,task_norm,wall_time_s"));
}

#[test]
fn gen_data_and_baseline() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), TINY).unwrap();
    let listed = ok(fedroute(
        &["gen-data", "--config", "c.toml", "--seed", "8", "--out", "o", "--variant", "VRPBTW", "--count", "5"],
        dir.path(),
        None,
    ));
    assert!(listed.contains("VRPBTW_n5_seed8.bin"));
    assert!(listed.contains("ref_OVRPB_n5_eval"));
    let text = fs::read_to_string(dir.path().join("o/data/VRPBTW_n5_seed8.txt")).unwrap();
    assert_eq!(text.matches("variant: VRPBTW").count(), 5);
    let csv = ok(fedroute(
        &["baseline", "--config", "c.toml", "--seed", "8", "--out", "o", "--data", "o/data/VRPBTW_n5_seed8.bin"],
        dir.path(),
        None,
    ));
    let body = fs::read_to_string(dir.path().join(csv.trim())).unwrap();
    assert_eq!(body.lines().count(), 6);
    assert!(body.starts_with("index,variant,cost,routes"));
}

#[test]
fn gradcheck_passes_on_small_arch() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), TINY).unwrap();
    let out = ok(fedroute(
        &["gradcheck", "--config", "c.toml", "--seed", "1", "--out", "o", "--n", "4"],
        dir.path(),
        None,
    ));
    assert_eq!(out.lines().filter(|l| l.ends_with(" ok")).count(), 16, "{out}");
}

#[test]
fn config_errors_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "[federation]\nkeep_percent = 150\n").unwrap();
    let out = fedroute(&["pretrain", "--config", "bad.toml", "--out", "o"], dir.path(), None);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("federation.keep_percent"));
    fs::write(dir.path().join("typo.toml"), "[train]\nbatchsize = 4\n").unwrap();
    let out = fedroute(&["pretrain", "--config", "typo.toml", "--out", "o"], dir.path(), None);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("batchsize"));
    let out = fedroute(&["finetune", "--mode", "fl", "--config", "typo.toml", "--out", "o"], dir.path(), None);
    assert_eq!(out.status.code(), Some(2));
}
