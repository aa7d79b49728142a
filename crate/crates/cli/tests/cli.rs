use std::process::{Command, Output};

fn eagle(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eagle"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

#[test]
fn missing_config_file_exits_with_usage_code() {
    let out = eagle(&["--config", "/nonexistent/x.cfg", "check-grad"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/x.cfg"));
}

#[test]
fn bad_override_is_rejected() {
    let out = eagle(&["--set", "galore_rank=many", "check-grad"]);
    assert_eq!(out.status.code(), Some(2));
    let out = eagle(&["--set", "no_such_key=1", "check-grad"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_thread_count_is_rejected() {
    let out = Command::new(env!("CARGO_BIN_EXE_eagle"))
        .args(["check-grad"])
        .env("EAGLE_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn resolved_config_is_echoed_before_running() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = format!("out_dir={}", dir.path().display());
    let cfg = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/tiny.cfg");
    let out = eagle(&["--config", cfg, "--set", &out_dir, "--set", "lr=0.25", "check-grad"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.starts_with("# resolved config\n"));
    assert!(text.contains("\nlr = 0.25\n"));
    assert!(text.contains("# seed 4096"));
    assert!(text.contains("gradient check PASSED"));
}

#[test]
fn eval_without_checkpoint_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let data = format!("data_dir={}", dir.path().join("none").display());
    let out = eagle(&["--set", &data, "eval", "--checkpoint", "/nonexistent.ckpt"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));
}
