mod common;

use std::path::Path;
use std::process::{Command, Output};

fn splatdrag(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_splatdrag")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) {
    let out = splatdrag(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn stage_commands_chain_into_a_scored_edit() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let config = common::toy_config(d);
    let config_path = d.join("run.json");
    std::fs::write(&config_path, serde_json::to_vec(&config).unwrap()).unwrap();

    ok(&["render", "--asset", s(&config.asset), "--out", s(&d.join("views")), "--resolution", "32"]);
    ok(&["project", "--asset", s(&config.asset), "--views", s(&d.join("views")), "--drags", s(&config.drags), "--out", s(&d.join("proj.json"))]);
    ok(&["drag", "--views", s(&d.join("views")), "--proj", s(&d.join("proj.json")), "--out", s(&d.join("edited")), "--config", s(&config_path)]);
    ok(&["reconstruct", "--views", s(&d.join("edited")), "--out", s(&d.join("fused.ply")), "--resolution", "16"]);
    ok(&[
        "refine", "--stage", "both", "--input", s(&d.join("fused.ply")), "--targets", s(&d.join("edited")),
        "--out", s(&d.join("final.ply")), "--log", s(&d.join("log.json")), "--config", s(&config_path),
    ]);
    let log: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("log.json")).unwrap()).unwrap();
    assert_eq!(log["deform"]["losses"].as_array().unwrap().len(), config.deform.iterations);
    assert_eq!(log["sds"].as_array().unwrap().len(), config.sds.iterations);

    let out = splatdrag(&["evaluate", "--orig", s(&d.join("views")), "--edited", s(&d.join("edited")), "--proj", s(&d.join("proj.json")), "--out", s(&d.join("dai.json"))]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 5);
    assert!(d.join("dai.json").is_file());
}

#[test]
fn adapter_reconstructor_is_reported_not_faked() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let config = common::toy_config(d);
    ok(&["render", "--asset", s(&config.asset), "--out", s(&d.join("views")), "--resolution", "32"]);
    let out = splatdrag(&["reconstruct", "--views", s(&d.join("views")), "--out", s(&d.join("f.ply")), "--backend", "adapter:lgm"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("adapter `lgm`"));
    assert!(!d.join("f.ply").exists());
}

#[test]
fn run_command_reports_stages_and_exit_status() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut config = common::toy_config(d);
    let path = d.join("run.json");
    std::fs::write(&path, serde_json::to_vec(&config).unwrap()).unwrap();
    let out = splatdrag(&["run", "--config", s(&path)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().filter(|l| l.contains("Complete")).count(), 7);

    config.backends.perceptual = "adapter:lpips".into();
    std::fs::write(&path, serde_json::to_vec(&config).unwrap()).unwrap();
    let out = splatdrag(&["run", "--config", s(&path), "--output", s(&d.join("other"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("Failed"));

    let out = splatdrag(&["run", "--config", s(&d.join("missing.json"))]);
    assert!(!out.status.success());
}
