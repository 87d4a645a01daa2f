use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use jko_icnn::experiment::RunConfig;

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jko-icnn")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY_HEAT: &str = r#"{
  "format": 1,
  "preset": "heat",
  "solver": { "steps": 2, "particles": 40, "inner_iters": 10, "hidden": [8, 8], "snapshot_stride": 1 }
}"#;

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("config_in.json");
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn presets_and_config_round_trip() {
    let o = cli(&["presets"]);
    assert!(o.status.success());
    let names: Vec<String> = stdout(&o).lines().map(str::to_string).collect();
    assert_eq!(names.len(), 8);
    for name in &names {
        let o = cli(&["config", "--preset", name]);
        assert!(o.status.success(), "{name}: {}", stderr(&o));
        let cfg = RunConfig::from_json(&stdout(&o), None).unwrap();
        assert_eq!(cfg.preset.to_string(), *name);
    }
}

#[test]
fn run_is_reproducible_single_threaded() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), TINY_HEAT);
    let outs: Vec<_> = (0..2).map(|i| tmp.path().join(format!("run{i}"))).collect();
    for out in &outs {
        let o = cli(&["run", "--config", &config, "--out", out.to_str().unwrap(), "--threads", "1"]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).contains("heat: step 2"), "{}", stdout(&o));
    }
    for f in ["trajectory.jsonl", "metrics.csv", "params.jsonl", "particles_2.csv", "summary.json", "config.json"] {
        assert_eq!(fs::read(outs[0].join(f)).unwrap(), fs::read(outs[1].join(f)).unwrap(), "{f}");
    }
}

#[test]
fn seed_flag_overrides_the_config() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), TINY_HEAT);
    let out = tmp.path().join("seeded");
    let o = cli(&["run", "--config", &config, "--seed", "7", "--out", out.to_str().unwrap(), "--threads", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 7);
}

#[test]
fn bad_config_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let typo = write_config(tmp.path(), r#"{"format": 1, "preset": "heat", "solver": {"tua": 0.1}}"#);
    let o = cli(&["run", "--config", &typo, "--out", tmp.path().join("x").to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("solver.tua"), "{}", stderr(&o));

    let negative = write_config(tmp.path(), r#"{"format": 1, "preset": "heat", "solver": {"tau": -1.0}}"#);
    let o = cli(&["run", "--config", &negative, "--out", tmp.path().join("y").to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("tau"), "{}", stderr(&o));

    let o = cli(&["run", "--preset", "nonsense"]);
    assert!(!o.status.success());
}

#[test]
fn density_on_a_finished_run() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), TINY_HEAT);
    let out = tmp.path().join("run");
    assert!(cli(&["run", "--config", &config, "--out", out.to_str().unwrap(), "--threads", "1"]).status.success());

    let o = cli(&["density", "--run", out.to_str().unwrap(), "--grid", "-1:1:5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("x0,log_density"));
    let rows: Vec<f64> = lines.map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(rows.len(), 5);
    assert!(rows.iter().all(|v| v.is_finite()));
    assert!(rows[2] > rows[0] && rows[2] > rows[4]);

    let pts = tmp.path().join("points.csv");
    fs::write(&pts, "x\n0.0\n0.5\n").unwrap();
    let dest = tmp.path().join("dens.csv");
    let o = cli(&[
        "density",
        "--run",
        out.to_str().unwrap(),
        "--points",
        pts.to_str().unwrap(),
        "--out",
        dest.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let written = fs::read_to_string(&dest).unwrap();
    assert_eq!(written.lines().count(), 3);
    assert_eq!(written.lines().nth(1).unwrap(), text.lines().nth(3).unwrap());
}

#[test]
fn analytic_reference_on_a_grid() {
    let o = cli(&["analytic", "--preset", "porous_medium", "--t", "0.25", "--grid", "-2:2:9"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let vals: Vec<f64> = stdout(&o).lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(vals.len(), 9);
    assert_eq!(vals[0], 0.0);
    assert!(vals[4] > 0.0);

    let o = cli(&["analytic", "--preset", "controlled_generation"]);
    assert!(!o.status.success());
}

#[test]
fn gradcheck_preset_reports_passing_checks() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("gc");
    let o = cli(&["run", "--preset", "gradcheck", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("[PASS] potential d=1"), "{text}");
    assert!(!text.contains("[FAIL]"));
    assert!(out.join("gradcheck.csv").exists());
}
