//! Black-box tests of the `svkit` binary: output formats, exit categories,
//! and artifact determinism.

use std::path::Path;
use std::process::{Command, Output};

fn svkit(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_svkit"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

#[test]
fn eval_prints_the_hand_sweep_table() {
    let dir = tempfile::tempdir().unwrap();
    // Interleaved target/nontarget scores whose EER is exactly 1/3.
    let scores = "\
e0 t0 0.8 target
e1 t1 0.6 target
e2 t2 0.4 target
e0 n0 0.7 nontarget
e1 n1 0.5 nontarget
e2 n2 0.3 nontarget
";
    std::fs::write(dir.path().join("scores.txt"), scores).unwrap();
    let out = svkit(
        &["eval", "--scores", "scores.txt", "--name", "hand"],
        dir.path(),
    );
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(
        stdout.contains("Model | %EER | DCF(0.01) | DCF(0.001)"),
        "{stdout}"
    );
    assert!(stdout.contains("hand | 33.33"), "{stdout}");
}

#[test]
fn unknown_config_key_exits_with_config_category() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.cfg"), "[model]\nnot_a_key = 3\n").unwrap();
    let out = svkit(&["--config", "bad.cfg", "synth", "--out", "c"], dir.path());
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn missing_input_exits_with_input_category() {
    let dir = tempfile::tempdir().unwrap();
    let out = svkit(&["eval", "--scores", "nope.txt"], dir.path());
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn metric_on_degenerate_scores_exits_with_data_category() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("scores.txt"), "a b 0.5 target\n").unwrap();
    let out = svkit(&["eval", "--scores", "scores.txt"], dir.path());
    assert_eq!(
        out.status.code(),
        Some(5),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

const SMALL_CFG: &str = "\
[corpus]
n_speakers = 3
eval_speakers = 2
utts_per_speaker = 4
enroll_per_speaker = 2
min_len_s = 0.5
max_len_s = 0.8
n_target_trials = 6
n_nontarget_trials = 6
";

#[test]
fn synth_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.cfg"), SMALL_CFG).unwrap();
    for out in ["a", "b"] {
        let r = svkit(&["--config", "c.cfg", "synth", "--out", out], dir.path());
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    }
    for file in [
        "features.ark",
        "features.ark.idx",
        "manifest.txt",
        "trials.txt",
        "config.resolved",
    ] {
        let a = std::fs::read(dir.path().join("a").join(file)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between reruns");
    }
}

#[test]
fn seed_env_var_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.cfg"), SMALL_CFG).unwrap();
    let base = svkit(&["--config", "c.cfg", "synth", "--out", "a"], dir.path());
    assert!(base.status.success());
    let seeded = Command::new(env!("CARGO_BIN_EXE_svkit"))
        .args(["--config", "c.cfg", "synth", "--out", "b"])
        .env("SVKIT_SEED", "777")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(seeded.status.success());
    let a = std::fs::read(dir.path().join("a/features.ark")).unwrap();
    let b = std::fs::read(dir.path().join("b/features.ark")).unwrap();
    assert_ne!(a, b, "SVKIT_SEED did not change the corpus");
    let resolved = std::fs::read_to_string(dir.path().join("b/config.resolved")).unwrap();
    assert!(resolved.contains("seed = 777"));
}

#[test]
fn run_manifest_records_command_and_hash() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.cfg"), SMALL_CFG).unwrap();
    let r = svkit(&["--config", "c.cfg", "synth", "--out", "a"], dir.path());
    assert!(r.status.success());
    let manifest = std::fs::read_to_string(dir.path().join("a/run.manifest")).unwrap();
    assert!(manifest.contains("command synth"));
    assert!(manifest.contains("config_hash "));
    assert!(manifest.contains("output manifest.txt"));
    assert!(manifest.contains("timestamp "));
}
