use std::fs;

use jko_icnn::experiment::{run, Preset, RunConfig};
use serde_json::Value;

fn tiny(preset: Preset) -> RunConfig {
    let mut cfg = RunConfig::preset(preset);
    cfg.solver.steps = 3;
    cfg.solver.particles = 60;
    cfg.solver.inner_iters = 15;
    cfg.solver.hidden = vec![8, 8];
    cfg.solver.snapshot_stride = 2;
    cfg
}

fn read_lines(path: &std::path::Path) -> Vec<Value> {
    fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn heat_run_writes_a_self_describing_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(Preset::Heat);
    let summary = run(&cfg, dir.path()).unwrap();
    assert_eq!(summary.arms.len(), 1);
    for f in [
        "manifest.json",
        "config.json",
        "trajectory.jsonl",
        "metrics.csv",
        "params.jsonl",
        "summary.json",
        "timing.jsonl",
    ] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    for s in [0, 2, 3] {
        assert!(dir.path().join(format!("particles_{s}.csv")).exists(), "snapshot {s}");
    }
    assert!(!dir.path().join("particles_1.csv").exists());
    let traj = read_lines(&dir.path().join("trajectory.jsonl"));
    assert_eq!(traj.len(), 4);
    assert_eq!(traj[3]["step"], 3);
    assert!(traj[2]["metrics"]["l1_error"].is_number());
    assert_eq!(read_lines(&dir.path().join("params.jsonl")).len(), 3);
    let manifest: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 0);
    assert_eq!(manifest["preset"], "heat");
    assert!(manifest["version"].is_string());

    // the echoed config reproduces the run
    let echoed = RunConfig::from_json(&fs::read_to_string(dir.path().join("config.json")).unwrap(), None).unwrap();
    assert_eq!(echoed, cfg);
    let again = tempfile::tempdir().unwrap();
    run(&echoed, again.path()).unwrap();
    for f in ["trajectory.jsonl", "metrics.csv", "params.jsonl", "particles_3.csv"] {
        assert_eq!(fs::read(dir.path().join(f)).unwrap(), fs::read(again.path().join(f)).unwrap(), "{f}");
    }
    let mass = summary.arms[0].density_mass.unwrap();
    assert!((mass - 1.0).abs() < 1e-3, "{mass}");
}

#[test]
fn zero_steps_leave_only_the_initial_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(Preset::Heat);
    cfg.solver.steps = 0;
    run(&cfg, dir.path()).unwrap();
    let snaps: Vec<_> = fs::read_dir(dir.path())
        .unwrap()
        .filter_map(|e| e.ok()?.file_name().into_string().ok())
        .filter(|n| n.starts_with("particles_"))
        .collect();
    assert_eq!(snaps, vec!["particles_0.csv".to_string()]);
    assert_eq!(read_lines(&dir.path().join("trajectory.jsonl")).len(), 1);
    assert_eq!(fs::read_to_string(dir.path().join("params.jsonl")).unwrap(), "");
}

#[test]
fn sweep_writes_one_subdirectory_per_arm() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(Preset::ControlledGeneration);
    cfg.solver.steps = 1;
    cfg.solver.particles = 30;
    let summary = run(&cfg, dir.path()).unwrap();
    assert_eq!(summary.arms.len(), 2);
    for arm in &summary.arms {
        assert!(arm.dir.join("trajectory.jsonl").exists());
        assert!(arm.dir.starts_with(dir.path()) && arm.dir != dir.path());
    }
}

#[test]
fn density_query_writes_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(Preset::DensityQuery);
    cfg.problem.density_grid = Some(jko_icnn::experiment::GridSpec { lo: -2.0, hi: 2.0, n: 9 });
    run(&cfg, dir.path()).unwrap();
    let text = fs::read_to_string(dir.path().join("density.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "x0,log_density,density,roundtrip_error,reference");
    assert_eq!(lines.len(), 10);
}

#[test]
fn gradcheck_preset_passes_its_checks() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::preset(Preset::Gradcheck);
    let g = cfg.problem.gradcheck.as_mut().unwrap();
    g.hutchinson_probes = 2000;
    g.hutchinson_tolerance = 0.05;
    let summary = run(&cfg, dir.path()).unwrap();
    assert!(!summary.checks.is_empty());
    for c in &summary.checks {
        assert!(c.pass, "{c:?}");
    }
    assert!(dir.path().join("gradcheck.csv").exists());
}
