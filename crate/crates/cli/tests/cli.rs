use std::fs;
use std::process::Command;

fn optreg() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_optreg"));
    c.env("RUST_LOG", "off");
    c
}

#[test]
fn missing_config_is_an_error() {
    let status = optreg().arg("generate").status().unwrap();
    assert_eq!(status.code(), Some(1));
    let status = optreg().args(["--config", "/nonexistent/cfg.json", "generate"]).status().unwrap();
    assert_eq!(status.code(), Some(1));
}

#[test]
fn generate_inspect_and_train_on_a_small_problem() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    fs::write(
        &cfg,
        r#"{"system": "nl2", "region": {"kind": "ball", "center": [0, 0], "radius": 1.0, "points": 6},
            "generation": {"delta": 0.05, "divergence_bound": 72.0},
            "train": {"epochs": 2, "stride": 50, "hidden": [8]},
            "simulate": {"test_points": 2}}"#,
    )
    .unwrap();
    let out = tmp.path().join("out");
    let run = |args: &[&str]| {
        optreg()
            .args(["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
            .args(args)
            .output()
            .unwrap()
    };

    let missing = run(&["inspect"]);
    assert_eq!(missing.status.code(), Some(1));
    let missing = run(&["train"]);
    assert_eq!(missing.status.code(), Some(1));

    let gen = run(&["generate"]);
    assert_eq!(gen.status.code(), Some(0), "{}", String::from_utf8_lossy(&gen.stderr));
    assert!(String::from_utf8_lossy(&gen.stdout).contains("targets attempted 6"));

    let inspect = run(&["inspect"]);
    assert_eq!(inspect.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&inspect.stdout).contains("system nl2"));

    assert_eq!(run(&["train"]).status.code(), Some(0));
    assert!(out.join("value.json").exists() && out.join("policy.json").exists());

    let bad = run(&["simulate", "--x0", "1.0,abc"]);
    assert_eq!(bad.status.code(), Some(1));
}
