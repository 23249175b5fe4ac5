use std::process::Command;

fn stealth(dir: &std::path::Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_stealth"))
        .arg("--run-dir")
        .arg(dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

#[test]
fn validate_prints_normalized_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = stealth(dir.path(), &["--seed", "9", "--override", "attack.pgd_epsilon=4/255", "validate"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("\"seed\":9"), "{text}");
    assert!(text.contains("0.01568"), "{text}");
}

#[test]
fn bad_value_exits_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = stealth(dir.path(), &["--override", "controlvae.gamma=ten", "validate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("controlvae.gamma"));
}

#[test]
fn missing_prerequisite_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = stealth(dir.path(), &["report"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("run `attack` first"));
}
