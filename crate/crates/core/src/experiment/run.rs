//! Run driver: executes a configuration and writes its run directory.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array1, Array2, Axis};
use serde::Serialize;
use serde_json::json;

use super::{functional, reference_energy, run_gradcheck, CheckResult, Preset, RunConfig, TermConfig};
use crate::analytic::AnalyticSolution;
use crate::cloud::ParticleCloud;
use crate::density::{log_density_batch, DensityConfig};
use crate::error::{Error, Result};
use crate::icnn::{Icnn, IcnnArch};
use crate::jko::{run_flow_observed, FlowTrajectory, StepRecord, StepReport};
use crate::metrics::{default_grid, kde, l1_error, silverman_bandwidth, trapezoid, w2_marginals};

/// Per-step diagnostics of a cloud.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepMetrics {
    pub mass: f64,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    /// Sum over coordinates of the squared 1-D W₂ to the initial cloud.
    pub w2_to_initial: f64,
    /// KDE L1 error against the reference density (1-D, snapshot steps).
    pub l1_error: Option<f64>,
    /// Reference energy at the same flow time, by quadrature.
    pub analytic_energy: Option<f64>,
    /// Largest relative distance to the exact particle path (advection).
    pub path_error: Option<f64>,
}

/// Metrics of `cloud` at flow time `t`; the KDE error is computed only when
/// `with_kde` is set.
pub fn step_metrics(
    cloud: &ParticleCloud,
    initial: &ParticleCloud,
    terms: &[TermConfig],
    reference: Option<&AnalyticSolution>,
    t: f64,
    with_kde: bool,
    bandwidth: Option<f64>,
) -> Result<StepMetrics> {
    let mut l1 = None;
    let mut path_error = None;
    if let Some(r) = reference {
        if let AnalyticSolution::AdvectionQuadratic { x0 } = r {
            let x0 = Array1::from(x0.clone());
            let mut worst = 0.0f64;
            for (x, o) in cloud.points.rows().into_iter().zip(cloud.origin.rows()) {
                let target = crate::analytic::advection_position(o, t, x0.view());
                let err = (&x - &target).mapv(|v| v * v).sum().sqrt() / target.dot(&target).sqrt().max(1e-12);
                worst = worst.max(err);
            }
            path_error = Some(worst);
        } else if with_kde && cloud.dim() == 1 {
            let h = match bandwidth {
                Some(h) => h,
                None => silverman_bandwidth(cloud)?,
            };
            let grid = default_grid(cloud, h)?;
            let est = kde(cloud, Some(h), grid.view())?;
            let exact = grid.mapv(|x| r.density(x, t).unwrap_or(0.0));
            l1 = Some(l1_error(grid.view(), est.view(), exact.view())?);
        }
    }
    Ok(StepMetrics {
        mass: cloud.mass(),
        mean: cloud.mean().to_vec(),
        variance: cloud.variance().to_vec(),
        w2_to_initial: w2_marginals(cloud, initial)?,
        l1_error: l1,
        analytic_energy: reference.and_then(|r| reference_energy(terms, r, t)),
        path_error,
    })
}

/// Outcome of one flow of a run.
#[derive(Debug, Clone)]
pub struct ArmSummary {
    pub label: String,
    pub dir: PathBuf,
    pub trajectory: FlowTrajectory,
    pub final_metrics: StepMetrics,
    /// Quadrature mass of the final density, when requested.
    pub density_mass: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct RunSummary {
    pub arms: Vec<ArmSummary>,
    pub checks: Vec<CheckResult>,
}

fn io_err<E: std::fmt::Display>(path: &Path) -> impl Fn(E) -> Error + '_ {
    move |e| Error::Io(format!("{}: {e}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    csv::Writer::from_path(path).map_err(io_err(path))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_particles(dir: &Path, step: usize, cloud: &ParticleCloud) -> Result<()> {
    let path = dir.join(format!("particles_{step}.csv"));
    let mut w = csv_writer(&path)?;
    let d = cloud.dim();
    let mut header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    header.extend(["weight".into(), "cum_logdet".into()]);
    w.write_record(&header).map_err(io_err(&path))?;
    for i in 0..cloud.len() {
        let mut row: Vec<String> = cloud.points.row(i).iter().map(f64::to_string).collect();
        row.push(cloud.weights[i].to_string());
        row.push(cloud.cum_logdet[i].to_string());
        w.write_record(&row).map_err(io_err(&path))?;
    }
    w.flush().map_err(io_err(&path))
}

struct ArmWriter {
    dir: PathBuf,
    trajectory: BufWriter<File>,
    metrics: csv::Writer<File>,
    params: BufWriter<File>,
    timing: BufWriter<File>,
    dim: usize,
    arch: IcnnArch,
}

impl ArmWriter {
    fn new(dir: &Path, dim: usize, arch: IcnnArch) -> Result<Self> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mpath = dir.join("metrics.csv");
        let mut metrics = csv_writer(&mpath)?;
        let mut header: Vec<String> = [
            "step",
            "t",
            "energy",
            "transport",
            "accepted",
            "mass",
            "w2_to_initial",
            "l1_error",
            "analytic_energy",
            "path_error",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        header.extend((0..dim).map(|j| format!("mean_{j}")));
        header.extend((0..dim).map(|j| format!("var_{j}")));
        metrics.write_record(&header).map_err(io_err(&mpath))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            trajectory: create(&dir.join("trajectory.jsonl"))?,
            metrics,
            params: create(&dir.join("params.jsonl"))?,
            timing: create(&dir.join("timing.jsonl"))?,
            dim,
            arch,
        })
    }

    fn record(&mut self, rec: &StepRecord, t: f64, m: &StepMetrics, report: Option<&StepReport>) -> Result<()> {
        let inner = report.map(|r| {
            json!({
                "best_iteration": r.best_iteration,
                "first_loss": r.losses.first(),
                "last_loss": r.losses.last(),
            })
        });
        let line = json!({
            "step": rec.step,
            "t": t,
            "accepted": rec.accepted,
            "energy": rec.energy,
            "transport": rec.transport,
            "terms": rec.terms,
            "metrics": m,
            "inner": inner,
        });
        let tpath = self.dir.join("trajectory.jsonl");
        serde_json::to_writer(&mut self.trajectory, &line).map_err(io_err(&tpath))?;
        writeln!(self.trajectory).map_err(io_err(&tpath))?;

        let mut row = vec![
            rec.step.to_string(),
            t.to_string(),
            rec.energy.to_string(),
            rec.transport.to_string(),
            rec.accepted.to_string(),
            m.mass.to_string(),
            m.w2_to_initial.to_string(),
            opt(m.l1_error),
            opt(m.analytic_energy),
            opt(m.path_error),
        ];
        row.extend(m.mean.iter().map(f64::to_string));
        row.extend(m.variance.iter().map(f64::to_string));
        debug_assert_eq!(row.len(), 10 + 2 * self.dim);
        let mpath = self.dir.join("metrics.csv");
        self.metrics.write_record(&row).map_err(io_err(&mpath))?;

        let ppath = self.dir.join("params.jsonl");
        if let Some(p) = &rec.params {
            let net = Icnn { arch: self.arch.clone(), params: p.clone() };
            writeln!(self.params, "{}", net.to_json()).map_err(io_err(&ppath))?;
        }
        let wpath = self.dir.join("timing.jsonl");
        let timing = json!({ "step": rec.step, "wall_time": rec.wall_time });
        serde_json::to_writer(&mut self.timing, &timing).map_err(io_err(&wpath))?;
        writeln!(self.timing).map_err(io_err(&wpath))?;
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        let d = self.dir.clone();
        self.trajectory.flush().map_err(io_err(&d))?;
        self.metrics.flush().map_err(io_err(&d))?;
        self.params.flush().map_err(io_err(&d))?;
        self.timing.flush().map_err(io_err(&d))
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut f = create(path)?;
    serde_json::to_writer_pretty(&mut f, value).map_err(io_err(path))?;
    writeln!(f).map_err(io_err(path))?;
    f.flush().map_err(io_err(path))
}

/// Quadrature mass of the final density on `n` points spanning the final
/// particles and eight standard deviations around their mean.
fn final_density_mass(config: &RunConfig, traj: &FlowTrajectory, n: usize) -> Result<f64> {
    let cloud = &traj.final_cloud;
    let xs = cloud.points.column(0);
    let (mean, sd) = (cloud.mean()[0], cloud.variance()[0].sqrt());
    let lo = xs.iter().cloned().fold(mean - 8.0 * sd, f64::min);
    let hi = xs.iter().cloned().fold(mean + 8.0 * sd, f64::max);
    let grid = Array1::linspace(lo, hi, n);
    let pts = grid.clone().insert_axis(Axis(1));
    let dcfg = DensityConfig { seed: config.solver.seed, ..DensityConfig::default() };
    let evals = log_density_batch(pts.view(), &traj.maps(), &config.problem.initial, &dcfg)?;
    let dens = Array1::from_iter(evals.iter().map(|e| e.log_density.exp()));
    trapezoid(grid.view(), dens.view())
}

fn write_density_grid(config: &RunConfig, traj: &FlowTrajectory, dir: &Path) -> Result<()> {
    let Some(grid) = config.problem.density_grid else { return Ok(()) };
    let d = traj.final_cloud.dim();
    let pts: Array2<f64> = grid.points(d);
    let dcfg = DensityConfig { seed: config.solver.seed, ..DensityConfig::default() };
    let evals = log_density_batch(pts.view(), &traj.maps(), &config.problem.initial, &dcfg)?;
    let t = config.solver.tau * (traj.records.len() - 1) as f64;
    let path = dir.join("density.csv");
    let mut w = csv_writer(&path)?;
    let mut header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    header.extend(["log_density", "density", "roundtrip_error", "reference"].map(String::from));
    w.write_record(&header).map_err(io_err(&path))?;
    for (x, e) in pts.rows().into_iter().zip(&evals) {
        let mut row: Vec<String> = x.iter().map(f64::to_string).collect();
        let reference = match (&config.problem.reference, d) {
            (Some(r), 1) => r.density(x[0], t),
            _ => None,
        };
        row.extend([
            e.log_density.to_string(),
            e.log_density.exp().to_string(),
            e.roundtrip_error.to_string(),
            opt(reference),
        ]);
        w.write_record(&row).map_err(io_err(&path))?;
    }
    w.flush().map_err(io_err(&path))
}

fn run_arm(
    config: &RunConfig,
    initial: &ParticleCloud,
    terms: &[TermConfig],
    dir: &Path,
    label: &str,
) -> Result<ArmSummary> {
    let f = functional(terms, initial);
    let solver = &config.solver;
    let reference = config.problem.reference.as_ref();
    let bw = config.problem.metrics.kde_bandwidth;
    let stride = solver.snapshot_stride;
    let mut writer = ArmWriter::new(dir, initial.dim(), solver.arch(initial.dim()))?;

    let e0 = f.exact_terms(initial).unwrap_or_else(|_| vec![f64::NAN; f.terms.len()]);
    let rec0 = StepRecord {
        step: 0,
        params: None,
        energy: e0.iter().sum(),
        terms: e0,
        transport: 0.0,
        accepted: true,
        wall_time: 0.0,
    };
    let m0 = step_metrics(initial, initial, terms, reference, 0.0, true, bw)?;
    writer.record(&rec0, 0.0, &m0, None)?;
    write_particles(dir, 0, initial)?;

    let mut failure: Option<Error> = None;
    let mut last_metrics = m0;
    let started = Instant::now();
    let traj = run_flow_observed(initial.clone(), &f, solver, |rec, cloud, report| {
        if failure.is_some() {
            return;
        }
        let t = solver.tau * rec.step as f64;
        let snapshot = rec.step % stride == 0 || rec.step == solver.steps;
        let res = step_metrics(cloud, initial, terms, reference, t, snapshot, bw).and_then(|m| {
            writer.record(rec, t, &m, Some(report))?;
            if snapshot {
                write_particles(dir, rec.step, cloud)?;
                log::info!(
                    "{}step {}/{}: energy {:.6e}{}",
                    if label.is_empty() { String::new() } else { format!("[{label}] ") },
                    rec.step,
                    solver.steps,
                    rec.energy,
                    m.l1_error.map(|e| format!(", L1 {e:.4}")).unwrap_or_default()
                );
            }
            last_metrics = m;
            Ok(())
        });
        if let Err(e) = res {
            failure = Some(e);
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    writer.finish()?;
    log::debug!("flow finished in {:.1} s", started.elapsed().as_secs_f64());

    let density_mass = match config.problem.metrics.density_mass_points {
        n if n >= 2 && initial.dim() == 1 => Some(final_density_mass(config, &traj, n)?),
        _ => None,
    };
    write_density_grid(config, &traj, dir)?;
    let summary = json!({
        "label": label,
        "steps": solver.steps,
        "t_final": solver.tau * solver.steps as f64,
        "final_energy": traj.records.last().map(|r| r.energy),
        "final_terms": traj.records.last().map(|r| r.terms.clone()),
        "final_metrics": last_metrics,
        "density_mass": density_mass,
        "accepted_steps": traj.records.iter().skip(1).filter(|r| r.accepted).count(),
    });
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(ArmSummary {
        label: label.to_string(),
        dir: dir.to_path_buf(),
        trajectory: traj,
        final_metrics: last_metrics,
        density_mass,
    })
}

fn write_checks(dir: &Path, checks: &[CheckResult]) -> Result<()> {
    let path = dir.join("gradcheck.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["check", "dim", "value", "tolerance", "pass"]).map_err(io_err(&path))?;
    for c in checks {
        w.write_record([
            c.check.clone(),
            c.dim.to_string(),
            c.value.to_string(),
            c.tolerance.to_string(),
            c.pass.to_string(),
        ])
        .map_err(io_err(&path))?;
    }
    w.flush().map_err(io_err(&path))
}

/// Execute `config`, writing everything under `out`.
pub fn run(config: &RunConfig, out: &Path) -> Result<RunSummary> {
    config.validate()?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    write_json(&out.join("config.json"), config)?;
    let mut summary = RunSummary::default();
    let mut arms = Vec::new();

    if config.preset == Preset::Gradcheck {
        let g = config.problem.gradcheck.clone().unwrap_or_default();
        summary.checks = run_gradcheck(&g, &config.solver)?;
        write_checks(out, &summary.checks)?;
    } else {
        let initial = config.initial_cloud()?;
        for (label, terms) in config.arms() {
            let dir = if label.is_empty() { out.to_path_buf() } else { out.join(&label) };
            let arm = run_arm(config, &initial, &terms, &dir, &label)?;
            let labels: Vec<&str> = functional(&terms, &initial).terms.iter().map(|t| t.label()).collect();
            arms.push(json!({
                "label": label,
                "dir": if label.is_empty() { ".".to_string() } else { label.clone() },
                "terms": labels,
                "coefs": terms.iter().map(TermConfig::coef).collect::<Vec<_>>(),
            }));
            summary.arms.push(arm);
        }
    }

    let manifest = json!({
        "format": super::CONFIG_FORMAT,
        "package": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "preset": config.preset,
        "seed": config.solver.seed,
        "particles": config.solver.particles,
        "steps": config.solver.steps,
        "arms": arms,
        "nondeterministic_files": ["timing.jsonl"],
    });
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(summary)
}
