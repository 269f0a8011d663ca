use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn smoke() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../manifests/smoke.toml")
}

fn sdif(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdif"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .unwrap()
}

fn error_line(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|e| panic!("not JSON ({e}): {stderr}"))
}

#[test]
fn missing_manifest_is_a_config_error() {
    let out = sdif(&["train", "--manifest", "/nonexistent/m.toml"]);
    assert!(!out.status.success());
    let err = error_line(&out);
    assert_eq!(err["kind"], "config");
    assert!(err["message"].as_str().unwrap().contains("/nonexistent/m.toml"));
}

#[test]
fn invalid_manifest_lists_problems() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "seeds = []\n[train]\nlambda = -2.0\n").unwrap();
    let out = sdif(&["ablate", "--manifest", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let message = error_line(&out)["message"].as_str().unwrap().to_string();
    assert!(message.contains("seeds") && message.contains("lambda"), "{message}");
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = sdif(&["fly"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["kind"], "usage");
}

#[test]
fn help_succeeds() {
    let out = sdif(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["train", "eval", "ablate", "sweep-lambda", "gen-data", "bank-inspect"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn train_eval_and_inspect_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let manifest = smoke();
    let m = manifest.to_str().unwrap();
    let run = sdif(&["train", "--manifest", m, "--seed", "4", "--out", out, "--deterministic"]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let ck = dir.path().join("full/seed4/checkpoint.bin");
    assert!(ck.exists());
    let ck = ck.to_str().unwrap();
    let eval = sdif(&["eval", "--manifest", m, "--out", out, "--checkpoint", ck]);
    assert!(eval.status.success());
    assert!(dir.path().join("eval.csv").exists());
    let bank = sdif(&["bank-inspect", "--manifest", m, "--out", out, "--checkpoint", ck]);
    assert!(bank.status.success());
    assert!(dir.path().join("bank.csv").exists());
}

#[test]
fn eval_of_a_missing_checkpoint_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = smoke();
    let out = sdif(&[
        "eval",
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--checkpoint",
        dir.path().join("none.bin").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_line(&out)["kind"], "io");
}

#[test]
fn gen_data_writes_images_and_index() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = smoke();
    let out = sdif(&["gen-data", "--manifest", manifest.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success());
    let index = std::fs::read_to_string(dir.path().join("manifest.csv")).unwrap();
    assert_eq!(index.lines().count(), 1 + 3 * 32);
}
