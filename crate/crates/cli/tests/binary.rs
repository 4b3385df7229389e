use std::process::Command;

fn xmexp(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_xmexp")).args(args).output().unwrap()
}

#[test]
fn exit_codes() {
    assert_eq!(xmexp(&["--help"]).status.code(), Some(0));
    assert_eq!(xmexp(&[]).status.code(), Some(1));
    assert_eq!(xmexp(&["frobnicate"]).status.code(), Some(1));
    let missing = xmexp(&["eval", "--ckpt", "/nonexistent.ckpt"]);
    assert_eq!(missing.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&missing.stderr).unwrap();
    assert_eq!(err["kind"], "io");
}

#[test]
fn theory_check_reports_pass() {
    let out = xmexp(&["theory-check", "--samples", "100", "--max-n", "5"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().last().unwrap().starts_with("PASS: 400 samples, 0 violations"), "{text}");
}

#[test]
fn xmexp_threads_is_accepted() {
    let out = Command::new(env!("CARGO_BIN_EXE_xmexp"))
        .env("XMEXP_THREADS", "1")
        .args(["theory-check", "--samples", "20", "--max-n", "3"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
}
