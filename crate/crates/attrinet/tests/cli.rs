//! End-to-end smoke of the installed binary: argument wiring, printed paths,
//! and exit codes. The full command chain is exercised at the library level;
//! here only the process boundary is under test.

use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_attrinet"))
}

#[test]
fn synth_succeeds_and_prints_every_written_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("synth.cfg");
    std::fs::write(&cfg, "h = 16\nw = 16\nsynth.n = 4\nsynth.classes = 2\nsynth.seed = 1\n")
        .unwrap();
    let out = dir.path().join("out");
    let result = bin()
        .arg("synth")
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(result.status.success(), "stderr: {}", String::from_utf8_lossy(&result.stderr));
    let stdout = String::from_utf8_lossy(&result.stdout);
    assert!(stdout.contains("labels.csv"), "{stdout}");
    assert!(stdout.contains("resolved.cfg"), "{stdout}");
    assert!(out.join("labels.csv").is_file());
}

#[test]
fn unknown_config_key_exits_nonzero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "h = 16\nbogus_key = 1\n").unwrap();
    let result = bin()
        .arg("synth")
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert!(!result.status.success());
    let stderr = String::from_utf8_lossy(&result.stderr);
    assert!(stderr.contains("bogus_key"), "{stderr}");
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    let result = bin().arg("train").output().unwrap();
    assert!(!result.status.success());
}
