use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ecbf-swarm"))
}

fn configs() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary runs");
    eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn bounds_writes_table_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(bin().args(["bounds", "--config"]).arg(configs().join("reference.toml")).arg("--out").arg(dir.path()));
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("3.8945"), "{stdout}");

    let manifest = read_json(&dir.path().join("manifest.json"));
    assert_eq!(manifest["command"], "bounds");
    assert_eq!(manifest["outputs"]["bounds.json"], 1);
    assert_eq!(manifest["config"]["scenario"]["gains"]["alpha1"], 36.0);
    let bounds = read_json(&dir.path().join("bounds.json"));
    assert_eq!(bounds["schema_version"], 1);
    assert_eq!(bounds["rows"].as_array().unwrap().len(), 6);
}

#[test]
fn complex_poles_exit_with_invalid_gains_status() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(bin()
        .args(["validate-gains", "--out"])
        .arg(dir.path())
        .env("ECBF_SWARM_SCENARIO__GAINS__ALPHA1", "100")
        .env("ECBF_SWARM_SCENARIO__GAINS__ALPHA2", "2"));
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn reference_gains_validate() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(bin().args(["validate-gains", "--config"]).arg(configs().join("realworld.toml")).arg("--out").arg(dir.path()));
    assert!(out.status.success());
    let report = read_json(&dir.path().join("gains_report.json"));
    // Three agents and three obstacles: 3 agent pairs plus 9 agent-obstacle pairs.
    assert_eq!(report["pairs"].as_array().unwrap().len(), 12);
    assert!(dir.path().join("manifest.json").exists());
}

#[test]
fn missing_or_malformed_config_exits_with_config_status() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(bin().args(["bounds", "--config", "/definitely/not/here.toml", "--out"]).arg(dir.path()));
    assert_eq!(out.status.code(), Some(2));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[scenario]\nn_agentz = 2\n").unwrap();
    let out = run(bin().args(["bounds", "--config"]).arg(&bad).arg("--out").arg(dir.path()));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn crowded_world_exits_with_generation_status() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(bin()
        .args(["simulate", "--out"])
        .arg(dir.path())
        .env("ECBF_SWARM_SCENARIO__N_AGENTS", "20")
        .env("ECBF_SWARM_SCENARIO__MAX_PLACEMENT_ATTEMPTS", "100")
        .env("ECBF_SWARM_SCENARIO__ENV_BOUNDS__X", "[0.0, 1.0]")
        .env("ECBF_SWARM_SCENARIO__ENV_BOUNDS__Y", "[0.0, 1.0]"));
    assert_eq!(out.status.code(), Some(3));
}

fn short_simulation(dir: &Path, parallel: &str) -> serde_json::Value {
    let out = run(bin()
        .args(["simulate", "--seed", "7", "--regime", "r2.0", "--parallel", parallel, "--out"])
        .arg(dir)
        .env("ECBF_SWARM_SCENARIO__N_AGENTS", "3")
        .env("ECBF_SWARM_SCENARIO__N_OBSTACLES", "2")
        .env("ECBF_SWARM_SCENARIO__SIM_DURATION", "1.0"));
    assert!(out.status.success());
    read_json(&dir.join("report.json"))
}

#[test]
fn simulate_outputs_are_complete_and_thread_independent() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = short_simulation(a.path(), "1");
    let rb = short_simulation(b.path(), "2");
    assert_eq!(ra["fingerprint"], rb["fingerprint"]);
    assert_eq!(ra["agent_range"], 2.0);

    for file in ["trace.ndjson", "distances.csv", "violations.csv", "report.json", "manifest.json"] {
        assert!(a.path().join(file).exists(), "{file} missing");
    }
    let trace = std::fs::read_to_string(a.path().join("trace.ndjson")).unwrap();
    let header: serde_json::Value = serde_json::from_str(trace.lines().next().unwrap()).unwrap();
    assert_eq!(header["schema_version"], 1);
    let manifest = read_json(&a.path().join("manifest.json"));
    assert_eq!(manifest["config"]["scenario"]["seed"], 7);
    assert_eq!(manifest["env_overrides"].as_array().unwrap().len(), 3);
    assert_eq!(manifest["outputs"]["trace.ndjson"], 1);
}

#[test]
fn unknown_regime_is_a_usage_error() {
    let out = run(bin().args(["simulate", "--regime", "r3.0"]));
    assert_eq!(out.status.code(), Some(2));
}
