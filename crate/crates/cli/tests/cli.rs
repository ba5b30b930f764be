use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/tiny.toml");

fn accentvc(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_accentvc"))
        .args(args)
        .env("ACCENTVC_OUT", out)
        .env("RUST_BACKTRACE", "0")
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = accentvc(out, args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn fails(out: &Path, args: &[&str]) -> String {
    let o = accentvc(out, args);
    assert!(!o.status.success(), "{args:?} should fail");
    String::from_utf8(o.stderr).unwrap()
}

#[test]
fn full_pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    ok(out, &["gen-corpus", "--config", TINY]);
    assert!(out.join("seed-1/manifest.json").exists(), "output root taken from the environment");
    ok(out, &["train-recognizer"]);
    let err = fails(out, &["train-vc", "--system", "P1"]);
    assert!(err.contains("accent-T.ckpt"), "{err}");
    ok(out, &["finetune-recognizer"]);
    let first = ok(out, &["train-vc", "--system", "P1"]);
    assert!(first.contains("ran 4 epochs"), "{first}");
    let again = ok(out, &["train-vc", "--system", "P1"]);
    assert!(again.contains("already complete"), "{again}");
    ok(out, &["convert", "--system", "P1"]);
    let err = fails(out, &["convert", "--system", "P1", "--target", "s4"]);
    assert!(err.contains("valid targets: s1, s2, s3"), "{err}");
    let report = ok(out, &["eval"]);
    assert!(report.lines().any(|l| l.starts_with("P2\t1\t") && l.contains("\tabsent\t")), "{report}");
    assert!(report.lines().any(|l| l.starts_with("P1\t1\tcontent_acc\t")), "{report}");
    let err = fails(out, &["eval"]);
    assert!(err.contains("--force"), "{err}");
    let rerun = ok(out, &["eval", "--force"]);
    assert_eq!(rerun, report);
    ok(out, &["project", "--system", "P1"]);
    assert!(out.join("seed-1/project/P1.tsv").exists());
}

#[test]
fn explicit_out_beats_the_environment() {
    let env_dir = tempfile::tempdir().unwrap();
    let flag_dir = tempfile::tempdir().unwrap();
    let flag = flag_dir.path().to_str().unwrap();
    ok(env_dir.path(), &["gen-corpus", "--config", TINY, "--seed", "7", "--out", flag]);
    assert!(flag_dir.path().join("seed-7/world.bin").exists());
    assert!(!env_dir.path().join("seed-7").exists());
}

#[test]
fn typo_in_config_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nepochz = 3\n").unwrap();
    let err = fails(dir.path(), &["gen-corpus", "--config", cfg.to_str().unwrap()]);
    assert!(err.contains("epochz"), "{err}");
}

#[test]
fn bad_system_is_rejected_with_the_valid_ones() {
    let dir = tempfile::tempdir().unwrap();
    let err = fails(dir.path(), &["train-vc", "--system", "P3"]);
    assert!(err.contains("BL, P1, P2"), "{err}");
}

#[test]
fn grad_check_reports_each_layer() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["grad-check", "--layer", "linear", "--trials", "3"]);
    assert!(out.contains("linear") && out.contains("pass"), "{out}");
}
