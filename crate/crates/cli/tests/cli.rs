use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_randshift"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .output()
        .unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = |s: &str| tmp.path().join(s);
    assert_eq!(
        run(&out("a"), &["check", "--model", "growing_walk"]).status.code(),
        Some(0)
    );
    assert_eq!(run(&out("b"), &["check", "--model", "full2"]).status.code(), Some(2));
    assert_eq!(
        run(&out("c"), &["density", "--model", "sparse_deterministic"])
            .status
            .code(),
        Some(2)
    );
    assert!(out("c").join("check.json").exists());
    assert_eq!(
        run(&out("d"), &["check", "--model", "nn_walk", "--param", "eta=0"])
            .status
            .code(),
        Some(4)
    );
    assert_eq!(run(&out("e"), &["check", "--model", "nope"]).status.code(), Some(4));
    assert_eq!(run(&out("f"), &["check", "--pullback", "0"]).status.code(), Some(4));
    assert_eq!(run(&out("g"), &["frobnicate"]).status.code(), Some(4));
    let help = Command::new(env!("CARGO_BIN_EXE_randshift"))
        .arg("--help")
        .output()
        .unwrap();
    assert_eq!(help.status.code(), Some(0));
}

#[test]
fn finite_models_pass_the_gate() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(tmp.path(), &["gap", "--model", "golden_mean"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let gap = json(&tmp.path().join("gap.json"));
    let theta = gap["result"][0]["fit"]["theta"].as_f64().unwrap();
    assert!((theta - 0.381966).abs() < 0.01);
}

#[test]
fn flags_override_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    std::fs::write(
        &cfg,
        "model = \"nn_walk\"\npullback = 12\n[params]\neta = 2\n[truncation]\nL = 12\n",
    )
    .unwrap();
    let out = tmp.path().join("o");
    let o = run(
        &out,
        &["conformal", "--config", cfg.to_str().unwrap(), "--pullback", "15"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let doc = json(&out.join("lambda.json"));
    assert_eq!(doc["config"]["model"], "nn_walk");
    assert_eq!(doc["config"]["pullback"], 15);
    assert_eq!(doc["config"]["params"]["eta"], 2.0);
    assert_eq!(doc["config"]["truncation"]["L"], 12);
    assert_eq!(doc["schema_version"], 1);
    let manifest = json(&out.join("manifest.json"));
    assert_eq!(manifest["config_hash"], doc["config_hash"]);
    let csv = std::fs::read_to_string(out.join("nu.csv")).unwrap();
    assert!(csv.starts_with(&format!(
        "# schema_version=1 config_hash={}",
        doc["config_hash"].as_str().unwrap()
    )));

    std::fs::write(&cfg, "model = \"nn_walk\"\nbogus = 1\n").unwrap();
    let o = run(&out, &["check", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
}
