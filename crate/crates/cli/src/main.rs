use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use jko_icnn::density::{log_density_batch, DensityConfig};
use jko_icnn::experiment::{run, GridSpec, Preset, RunConfig};
use jko_icnn::icnn::Icnn;
use ndarray::Array2;

#[derive(Parser)]
#[command(name = "jko-icnn", version, about = "Wasserstein gradient flows by JKO steps over input-convex networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a preset flow and write its run directory.
    Run {
        /// JSON config; fields not given take the preset's defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        preset: Option<Preset>,
        /// Run directory (default `runs/<preset>-seed<seed>`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `solver.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads; 1 runs everything on the calling thread.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Print the full default config of a preset.
    Config {
        #[arg(long)]
        preset: Preset,
    },
    /// List the available presets.
    Presets,
    /// Evaluate the flowed log-density of a finished run at query points.
    Density {
        /// Run directory (or sweep arm subdirectory) holding params.jsonl.
        #[arg(long)]
        run: PathBuf,
        /// Tensor grid `lo:hi:n` along every axis.
        #[arg(long, conflicts_with = "points", allow_hyphen_values = true)]
        grid: Option<String>,
        /// CSV of query points with a header row.
        #[arg(long)]
        points: Option<PathBuf>,
        /// Output CSV (default stdout).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Evaluate a preset's reference density on a 1-D grid.
    Analytic {
        #[arg(long)]
        preset: Option<Preset>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Flow time.
        #[arg(long, default_value_t = 0.0)]
        t: f64,
        #[arg(long, default_value = "-3:3:121", allow_hyphen_values = true)]
        grid: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn set_threads(threads: Option<usize>) -> Result<()> {
    match threads {
        Some(0) => bail!("--threads must be at least 1"),
        Some(1) => jko_icnn::par::set_parallel(false),
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("building the thread pool")?,
        None => {}
    }
    Ok(())
}

fn load_config(config: Option<&Path>, preset: Option<Preset>) -> Result<RunConfig> {
    let cfg = match config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            RunConfig::from_json(&text, preset)?
        }
        None => match preset {
            Some(p) => RunConfig::preset(p),
            None => bail!("pass --preset or --config"),
        },
    };
    Ok(cfg)
}

fn parse_grid(s: &str) -> Result<GridSpec> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 3 {
        bail!("grid must look like lo:hi:n, got {s:?}");
    }
    let g = GridSpec { lo: parts[0].parse()?, hi: parts[1].parse()?, n: parts[2].parse()? };
    g.validate("--grid")?;
    Ok(g)
}

fn read_points(path: &Path, d: usize) -> Result<Array2<f64>> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let mut flat = Vec::new();
    let mut rows = 0;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() < d {
            bail!("{}: row {} has {} columns, need {d}", path.display(), i + 1, rec.len());
        }
        for j in 0..d {
            flat.push(rec[j].trim().parse::<f64>().with_context(|| format!("row {}, column {}", i + 1, j + 1))?);
        }
        rows += 1;
    }
    Ok(Array2::from_shape_vec((rows, d), flat)?)
}

fn output(out: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(std::io::stdout().lock()),
    })
}

/// Find the config echo of a run directory, looking one level up for sweep arms.
fn run_config(dir: &Path) -> Result<RunConfig> {
    for cand in [dir.join("config.json"), dir.join("../config.json")] {
        if cand.exists() {
            return Ok(RunConfig::from_json(&fs::read_to_string(&cand)?, None)?);
        }
    }
    bail!("no config.json in {} or its parent", dir.display())
}

fn density(run_dir: &Path, grid: Option<&str>, points: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let cfg = run_config(run_dir)?;
    let params_path = run_dir.join("params.jsonl");
    let text = fs::read_to_string(&params_path).with_context(|| format!("reading {}", params_path.display()))?;
    let maps: Vec<Icnn> = text.lines().map(Icnn::from_json).collect::<std::result::Result<_, _>>()?;
    let d = cfg.problem.initial.dim();
    let pts = match (grid, points) {
        (Some(g), _) => parse_grid(g)?.points(d),
        (None, Some(p)) => read_points(p, d)?,
        (None, None) => bail!("pass --grid or --points"),
    };
    let dcfg = DensityConfig { seed: cfg.solver.seed, ..DensityConfig::default() };
    let evals = log_density_batch(pts.view(), &maps, &cfg.problem.initial, &dcfg)?;
    let mut w = csv::Writer::from_writer(output(out)?);
    let mut header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    header.push("log_density".into());
    w.write_record(&header)?;
    for (x, e) in pts.rows().into_iter().zip(&evals) {
        let mut row: Vec<String> = x.iter().map(f64::to_string).collect();
        row.push(e.log_density.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn analytic(cfg: &RunConfig, t: f64, grid: &str, out: Option<&Path>) -> Result<()> {
    let Some(reference) = &cfg.problem.reference else { bail!("preset {} has no reference solution", cfg.preset) };
    let g = parse_grid(grid)?;
    let mut w = csv::Writer::from_writer(output(out)?);
    w.write_record(["x", "density"])?;
    for x in g.axis() {
        let Some(v) = reference.density(x, t) else { bail!("the {} reference has no density", cfg.preset) };
        w.write_record([x.to_string(), v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Print to stdout, treating a closed pipe (`| head`) as success.
fn emit(text: &str) -> Result<()> {
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Run { config, preset, out, seed, threads } => {
            set_threads(threads)?;
            let mut cfg = load_config(config.as_deref(), preset)?;
            if let Some(s) = seed {
                cfg.solver.seed = s;
            }
            cfg.validate()?;
            let out = out.unwrap_or_else(|| PathBuf::from(format!("runs/{}-seed{}", cfg.preset, cfg.solver.seed)));
            let summary = run(&cfg, &out)?;
            for arm in &summary.arms {
                let name = if arm.label.is_empty() { cfg.preset.to_string() } else { arm.label.clone() };
                let last = arm.trajectory.records.last().expect("initial record");
                let m = &arm.final_metrics;
                let mut line = format!("{name}: step {} energy {:.6e}", last.step, last.energy);
                if let Some(l1) = m.l1_error {
                    line += &format!(" l1_error {l1:.4}");
                }
                if let Some(p) = m.path_error {
                    line += &format!(" path_error {p:.4}");
                }
                if let Some(mass) = arm.density_mass {
                    line += &format!(" density_mass {mass:.6}");
                }
                line += &format!(" w2_to_initial {:.4e}", m.w2_to_initial);
                println!("{line}");
            }
            let failed = summary.checks.iter().filter(|c| !c.pass).count();
            for c in &summary.checks {
                println!(
                    "[{}] {} d={}: {:.3e} (tol {:.0e})",
                    if c.pass { "PASS" } else { "FAIL" },
                    c.check,
                    c.dim,
                    c.value,
                    c.tolerance
                );
            }
            println!("wrote {}", out.display());
            if failed > 0 {
                bail!("{failed} check(s) failed");
            }
        }
        Command::Config { preset } => emit(&RunConfig::preset(preset).to_json_pretty())?,
        Command::Presets => {
            let names: Vec<String> = Preset::ALL.iter().map(|p| p.to_string()).collect();
            emit(&names.join("\n"))?;
        }
        Command::Density { run, grid, points, out, threads } => {
            set_threads(threads)?;
            density(&run, grid.as_deref(), points.as_deref(), out.as_deref())?;
        }
        Command::Analytic { preset, config, t, grid, out } => {
            let cfg = load_config(config.as_deref(), preset)?;
            analytic(&cfg, t, &grid, out.as_deref())?;
        }
    }
    Ok(())
}
