mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn graphkd(workdir: &Path, config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_graphkd"))
        .arg("--workdir")
        .arg(workdir)
        .arg("--config")
        .arg(config)
        .arg("-q")
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn distill_is_deterministic_across_invocations() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.cfg");
    fs::write(&config, common::TINY).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for w in [&a, &b] {
        ok(&graphkd(w, &config, &["gen-data"]));
        ok(&graphkd(w, &config, &["--seed", "3", "--mode", "gl_gr", "distill"]));
    }
    let metrics = |w: &Path| fs::read(w.join("runs/gl_gr/seed3/metrics.csv")).unwrap();
    assert_eq!(metrics(&a), metrics(&b));
    let summary = fs::read_to_string(a.join("runs/gl_gr/seed3/summary.txt")).unwrap();
    assert!(summary.contains("\"status\": \"ok\"") || summary.contains("\"status\":\"ok\""));
    let cfg = fs::read_to_string(a.join("config.txt")).unwrap();
    assert!(cfg.contains("distill.seed = 3"));
}

#[test]
fn evaluate_checks_the_config_hash() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.cfg");
    fs::write(&config, common::TINY).unwrap();
    let w = dir.path().join("w");
    ok(&graphkd(&w, &config, &["--mode", "scratch", "distill"]));
    let ckpt = w.join("runs/scratch/seed0/best.ckpt");
    let ckpt = ckpt.to_str().unwrap();

    let first = ok(&graphkd(&w, &config, &["evaluate", "--checkpoint", ckpt]));
    let second = ok(&graphkd(&w, &config, &["evaluate", "--checkpoint", ckpt]));
    assert!(first.starts_with("accuracy "));
    assert_eq!(first, second);

    let changed = graphkd(&w, &config, &["--set", "distill.lr=0.02", "evaluate", "--checkpoint", ckpt]);
    assert!(!changed.status.success());
    assert!(String::from_utf8_lossy(&changed.stderr).contains("--force"));
    ok(&graphkd(&w, &config, &["--set", "distill.lr=0.02", "--force", "evaluate", "--checkpoint", ckpt]));
}

#[test]
fn bad_arguments_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.cfg");
    fs::write(&config, "distill.no_such_key = 1\n").unwrap();
    let out = graphkd(dir.path(), &config, &["gen-data"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));

    fs::write(&config, common::TINY).unwrap();
    let out = graphkd(dir.path(), &config, &["--mode", "best", "distill"]);
    assert!(!out.status.success());
    let out = graphkd(dir.path(), &config, &["pretrain", "X"]);
    assert!(!out.status.success());
}

#[test]
fn schema_lists_every_default() {
    let out = Command::new(env!("CARGO_BIN_EXE_graphkd")).arg("schema").output().unwrap();
    let text = ok(&out);
    let parsed = graphkd::Config::parse(&text).unwrap();
    assert_eq!(parsed.to_text(), graphkd::Config::default().to_text());
}
