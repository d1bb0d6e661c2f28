use std::path::PathBuf;
use std::process::Command;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mmimpact"));
    c.current_dir(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../.."));
    c
}

fn code(c: &mut Command) -> i32 {
    c.output().expect("binary runs").status.code().expect("exit code")
}

#[test]
fn help_exits_zero() {
    assert_eq!(code(bin().arg("--help")), 0);
}

#[test]
fn unknown_flag_is_usage_error() {
    assert_eq!(code(bin().args(["verify", "--bogus"])), 1);
}

#[test]
fn missing_config_is_reported() {
    let out = bin()
        .args(["verify", "--config", "does/not/exist.toml"])
        .output()
        .unwrap();
    assert_ne!(out.status.code(), Some(0));
    assert!(!out.stderr.is_empty());
}

#[test]
fn invalid_config_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let src =
        std::fs::read_to_string(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/baseline.toml")).unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, src.replace("delta = 0.02", "delta = -0.02")).unwrap();
    let out = bin().args(["verify", "--config"]).arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn small_verify_passes_and_writes_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["verify", "--trials", "200", "--paths", "200", "--out-dir"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let lines = std::fs::read_to_string(dir.path().join("verify.jsonl")).unwrap();
    for l in lines.lines() {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        assert_ne!(v["status"], "fail", "{l}");
    }
}
