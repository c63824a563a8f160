use std::process::Command;

fn seldcil() -> Command {
    Command::new(env!("CARGO_BIN_EXE_seldcil"))
}

#[test]
fn init_config_writes_a_loadable_config() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.json");
    let status = seldcil().args(["init-config", "--out"]).arg(&path).status().unwrap();
    assert!(status.success());
    seldcil::harness::ExperimentConfig::load(&path).unwrap();
}

#[test]
fn eval_scores_identical_directories_as_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let refs = dir.path().join("ref");
    std::fs::create_dir(&refs).unwrap();
    std::fs::write(refs.join("s.csv"), "0,1,10,5\n1,1,10,5\n4,3,-90,0\n").unwrap();
    let out = seldcil().args(["eval", "--pred"]).arg(&refs).arg("--ref").arg(&refs).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["F1"].as_f64(), Some(100.0));
    assert_eq!(v["ER"].as_f64(), Some(0.0));
}

#[test]
fn bad_variant_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = seldcil().args(["train", "--variant", "nope", "--out"]).arg(dir.path()).output().unwrap();
    assert!(!out.status.success());
}
