use std::path::Path;
use std::process::{Command, Output};

use platoon_shield::config::ScenarioConfig;
use platoon_shield::pipeline::DesignFile;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_platoon-shield"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn write_config(dir: &Path, edit: impl FnOnce(&mut ScenarioConfig)) -> String {
    let mut cfg = ScenarioConfig::reference();
    cfg.output.dir = dir.join("out");
    edit(&mut cfg);
    let path = dir.join("scenario.cfg");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn trace_format_help() {
    for args in [&["--help", "trace-format"][..], &["help", "trace-format"][..]] {
        let o = run(args);
        assert_eq!(code(&o), 0);
        let text = String::from_utf8_lossy(&o.stdout);
        assert!(text.contains("vehicle") && text.contains("alarm"), "{text}");
    }
}

#[test]
fn usage_error_exits_one() {
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(code(&run(&["simulate", "--seed", "x"])), 1);
}

#[test]
fn unparsable_config_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.cfg");
    std::fs::write(&path, "[vehicle]\nh = 0.5\ntau = \n").unwrap();
    let o = run(&["synthesize", "--config", path.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"));
}

#[test]
fn zero_noise_bound_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), |c| c.noise.w2_bar = 0.0);
    assert_eq!(code(&run(&["synthesize", "--config", &cfg])), 1);
}

#[test]
fn nonnegative_lambda_max_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), |c| c.synthesis.lambda_max = 0.0);
    assert_eq!(code(&run(&["synthesize", "--config", &cfg])), 1);
}

#[test]
fn missing_design_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("empty");
    let o = run(&["assess", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn diverging_simulation_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), |c| {
        c.simulation.steps = 2000;
        c.simulation.initial_states = vec![[1.0, 30.0, 0.0, 0.0, 0.0]];
    });
    let mut design = DesignFile::baseline();
    design.k = [50.0, 50.0];
    let design_path = dir.path().join("unstable.json");
    std::fs::write(&design_path, design.to_json()).unwrap();
    let o = run(&["simulate", "--config", &cfg, "--design", design_path.to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn simulate_baseline_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = run(&["simulate", "--design", "baseline", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("trace.csv")).unwrap();
    // header plus 500 steps for each of two vehicles
    assert_eq!(csv.lines().count(), 1 + 2 * 500);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("simulation.json")).unwrap()).unwrap();
    assert_eq!(report["command"], "simulate");
    assert!(report["simulation"]["detection"].is_array());
}

#[test]
fn same_seed_same_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let sim = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        let o = run(&["simulate", "--design", "published", "--seed", seed, "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let trace = std::fs::read_to_string(out.join("trace.csv")).unwrap();
        let report: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("simulation.json")).unwrap()).unwrap();
        (trace, report["simulation"].clone())
    };
    let a = sim("a", "7");
    let b = sim("b", "7");
    let c = sim("c", "8");
    assert_eq!(a, b);
    assert_ne!(a.0, c.0);
}
