//! The `wibmark` binary end to end on a tiny configuration: exit codes,
//! manifests, file formats and seeded reproducibility.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use wibmark::checkpoint::Checkpoint;
use wibmark::registry::Registry;

fn wibmark(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wibmark"))
        .current_dir(dir)
        .env_remove("TEAWIB_SEED")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = wibmark(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn tiny_config(dir: &Path) {
    let cfg = r#"{"pretrain_steps": 3, "wib_steps": 3, "batch_size": 2, "d_w": 16}"#;
    fs::write(dir.join("tiny.json"), cfg).unwrap();
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(wibmark(dir.path(), &["no-such-command"]).status.code(), Some(2));
    assert_eq!(wibmark(dir.path(), &["register", "--user", "a"]).status.code(), Some(2));
    assert_eq!(
        wibmark(dir.path(), &["train", "--ablation", "no_such_flag"]).status.code(),
        Some(2)
    );
    assert_eq!(
        wibmark(dir.path(), &["detect", "--image", "x.png"]).status.code(),
        Some(2)
    );
}

#[test]
fn runtime_errors_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.json"), r#"{"lambda_p": -1.0}"#).unwrap();
    assert_eq!(
        wibmark(dir.path(), &["--config", "bad.json", "gen-data", "--count", "1"]).status.code(),
        Some(3)
    );
    assert_eq!(
        wibmark(dir.path(), &["--checkpoint", "missing.twb", "fingerprint", "--user", "a"]).status.code(),
        Some(3)
    );
}

#[test]
fn version_flag_prints_the_tool_name() {
    let dir = tempfile::tempdir().unwrap();
    assert!(ok(dir.path(), &["--version"]).starts_with("wibmark v"));
}

#[test]
fn gen_data_is_seeded_and_writes_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["--seed", "5", "--out", "a", "gen-data", "--count", "3"]);
    ok(dir.path(), &["--seed", "5", "--out", "b", "gen-data", "--count", "3"]);
    ok(dir.path(), &["--seed", "6", "--out", "c", "gen-data", "--count", "3"]);
    let read = |d: &str| fs::read(dir.path().join(d).join("img_00002.png")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("a/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 5);
    assert_eq!(manifest["command"]["name"], "gen-data");
    assert_eq!(manifest["config"]["lambda_p"], 0.2);
    assert!(manifest["version"].as_str().unwrap().starts_with('v'));
}

#[test]
fn seed_environment_variable_overrides_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_wibmark"))
        .current_dir(dir.path())
        .env("TEAWIB_SEED", "42")
        .args(["--seed", "1", "gen-data", "--count", "1"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 42);
}

#[test]
fn every_ablation_flag_is_accepted() {
    for name in wibmark::training::AblationFlags::NAMES {
        let flags = wibmark::training::AblationFlags::only(name).unwrap();
        assert_eq!(flags.active(), vec![name]);
    }
}

#[test]
fn tiny_pipeline_produces_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    tiny_config(dir);
    let c = ["--config", "tiny.json"];
    let with = |rest: &[&str]| -> Vec<String> { c.iter().chain(rest).map(|s| s.to_string()).collect() };
    let run = |rest: &[&str]| {
        let args = with(rest);
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        ok(dir, &refs)
    };

    run(&["pretrain", "--heldout", "4"]);
    assert!(dir.join("pretrained.twb").exists());
    assert!(fs::read_to_string(dir.join("pretrain_log.csv")).unwrap().starts_with("step,"));

    run(&["--checkpoint", "pretrained.twb", "train", "--heldout", "4"]);
    let wib = Checkpoint::load(dir.join("wib.twb")).unwrap();
    assert!(!wib.baked);
    let log = fs::read_to_string(dir.join("train_log.csv")).unwrap();
    assert!(log.starts_with("step,l_w,l_v,l_l,total,bit_acc"));
    assert_eq!(log.lines().count(), 4);

    run(&["--registry", "reg.jsonl", "register", "--user", "alice", "--user", "bob", "--pad", "8"]);
    assert_eq!(Registry::load(dir.join("reg.jsonl")).unwrap().len(), 10);

    run(&["--registry", "reg.jsonl", "--checkpoint", "wib.twb", "fingerprint", "--user", "alice"]);
    run(&["--registry", "reg.jsonl", "--checkpoint", "wib.twb", "fingerprint", "--user", "bob"]);
    let baked = Checkpoint::load(dir.join("alice.baked.twb")).unwrap();
    assert!(baked.baked);
    assert!(baked.names().all(|n| n.starts_with("enc.") || n.starts_with("dec.")));

    run(&["--checkpoint", "alice.baked.twb", "--out", "g1", "generate", "--n", "2", "--deterministic"]);
    run(&["--checkpoint", "alice.baked.twb", "--out", "g2", "generate", "--n", "2", "--deterministic"]);
    let a = fs::read(dir.join("g1/gen_00001.png")).unwrap();
    assert_eq!(a, fs::read(dir.join("g2/gen_00001.png")).unwrap());

    let detect = run(&[
        "--registry", "reg.jsonl", "--checkpoint", "wib.twb", "detect", "--image", "g1/gen_00000.png", "--user", "alice",
        "--fpr", "1e-3",
    ]);
    assert!(detect.contains("matched_bits"));
    let verdict: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("detect.json")).unwrap()).unwrap();
    assert_eq!(verdict["k"], 16);

    run(&["--registry", "reg.jsonl", "--checkpoint", "wib.twb", "identify", "--image", "g1/gen_00000.png", "--fpr", "0.5"]);
    let id: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("identify.json")).unwrap()).unwrap();
    assert_eq!(id["candidates"], 10);

    run(&["--registry", "reg.jsonl", "--checkpoint", "wib.twb", "sweep", "--baked", "alice.baked.twb", "--user", "alice", "--n", "2"]);
    let sweep = fs::read_to_string(dir.join("sweep.csv")).unwrap();
    assert!(sweep.starts_with("transform,images,bit_accuracy"));
    assert_eq!(sweep.lines().count(), 1 + 1 + 8);

    run(&[
        "--registry", "reg.jsonl", "--checkpoint", "wib.twb", "collude", "--a", "alice.baked.twb", "--b", "bob.baked.twb",
        "--user-a", "alice", "--user-b", "bob", "--n", "2",
    ]);
    assert!(Checkpoint::load(dir.join("colluded.baked.twb")).unwrap().baked);
    assert!(dir.join("collusion.json").exists());

    run(&[
        "--registry", "reg.jsonl", "--checkpoint", "wib.twb", "attack", "--kind", "purification", "--baked",
        "alice.baked.twb", "--user", "alice", "--n", "2", "--steps", "2",
    ]);
    assert!(fs::read_to_string(dir.join("purification.csv")).unwrap().starts_with("step,psnr,bit_acc"));
}
