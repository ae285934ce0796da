use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn dsr(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dsr"))
        .current_dir(root)
        .arg("--root")
        .arg(root.join("out"))
        .args(args)
        .output()
        .unwrap()
}

fn is_empty(dir: &Path) -> bool {
    std::fs::read_dir(dir).unwrap().next().is_none()
}

#[test]
fn usage_errors_exit_two_without_writing() {
    let dir = TempDir::new().unwrap();
    for args in [
        &["frobnicate"][..],
        &["train", "recipe", "--bogus"],
        &["reconstruct", "--in", "a.wav"],
        &["--set", "codec.stagez=2", "corpus", "build"],
        &["--set", "codec.stages", "corpus", "build"],
    ] {
        let out = dsr(dir.path(), args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(is_empty(dir.path()), "{args:?} wrote files");
    }
    let out = dsr(dir.path(), &["--set", "nope=1", "train", "recipe"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("dsr: error stage=- "));
}

#[test]
fn runtime_errors_name_the_stage() {
    let dir = TempDir::new().unwrap();
    let out = dsr(dir.path(), &["train", "stage", "generator"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("stage=generator"), "{err}");

    let out = dsr(dir.path(), &["eval", "--bundle", "missing"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_succeeds() {
    let dir = TempDir::new().unwrap();
    let out = dsr(dir.path(), &["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("reconstruct"));
}
