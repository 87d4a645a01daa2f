//! Named experiment presets and the versioned run configuration.
//!
//! A run configuration is the preset's defaults with the user's JSON merged on
//! top, so a config file only needs the fields it changes.

mod gradcheck;
mod run;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::analytic::{
    arc_quadrature, barenblatt_radius, barenblatt_unit_c, fokker_planck_c, AnalyticSolution, InitialLaw, BARENBLATT_T0,
};
use crate::cloud::ParticleCloud;
use crate::divergence::DivergenceKind;
use crate::error::{Error, Result};
use crate::functionals::{FunctionalSpec, KernelFn, PotentialFn, Reference, Term, TermKind};
use crate::jko::SolverConfig;
use crate::numcore::RngStream;

pub use gradcheck::{run_gradcheck, CheckResult, GradcheckConfig};
pub use run::{run, step_metrics, ArmSummary, RunSummary, StepMetrics};

/// Version of the run-configuration schema.
pub const CONFIG_FORMAT: u32 = 1;

const SAMPLE_TAG: u64 = 0x5341_4d50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Heat,
    Advection,
    PorousMedium,
    FokkerPlanck,
    Aggregation,
    ControlledGeneration,
    DensityQuery,
    Gradcheck,
}

impl Preset {
    pub const ALL: [Preset; 8] = [
        Preset::Heat,
        Preset::Advection,
        Preset::PorousMedium,
        Preset::FokkerPlanck,
        Preset::Aggregation,
        Preset::ControlledGeneration,
        Preset::DensityQuery,
        Preset::Gradcheck,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Heat => "heat",
            Preset::Advection => "advection",
            Preset::PorousMedium => "porous_medium",
            Preset::FokkerPlanck => "fokker_planck",
            Preset::Aggregation => "aggregation",
            Preset::ControlledGeneration => "controlled_generation",
            Preset::DensityQuery => "density_query",
            Preset::Gradcheck => "gradcheck",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| {
            let names: Vec<_> = Preset::ALL.iter().map(|p| p.name()).collect();
            Error::ConfigInvalid(format!("preset: unknown preset {s:?} (expected one of {})", names.join(", ")))
        })
    }
}

/// One energy term in config form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TermConfig {
    /// `coef · ∫ ‖x − center‖² dρ`.
    Potential {
        coef: f64,
        center: Vec<f64>,
    },
    /// `coef · ½ ∬ W(x − x') dρ dρ`.
    Interaction {
        coef: f64,
        kernel: KernelFn,
    },
    NegEntropy {
        coef: f64,
    },
    /// `coef · ∫ ρ^m / (m − 1)`.
    NonlinearDiffusion {
        coef: f64,
        m: f64,
    },
    /// `coef · D(ρ, ρ₀)` against the initial particle cloud.
    Divergence {
        coef: f64,
        divergence: DivergenceKind,
    },
}

impl TermConfig {
    pub fn coef(&self) -> f64 {
        match self {
            TermConfig::Potential { coef, .. }
            | TermConfig::Interaction { coef, .. }
            | TermConfig::NegEntropy { coef }
            | TermConfig::NonlinearDiffusion { coef, .. }
            | TermConfig::Divergence { coef, .. } => *coef,
        }
    }

    fn set_coef(&mut self, c: f64) {
        match self {
            TermConfig::Potential { coef, .. }
            | TermConfig::Interaction { coef, .. }
            | TermConfig::NegEntropy { coef }
            | TermConfig::NonlinearDiffusion { coef, .. }
            | TermConfig::Divergence { coef, .. } => *coef = c,
        }
    }

    fn to_term(&self, initial: &ParticleCloud) -> Term {
        let kind = match self {
            TermConfig::Potential { center, .. } => {
                TermKind::Potential(PotentialFn::Quadratic { center: center.clone() })
            }
            TermConfig::Interaction { kernel, .. } => TermKind::Interaction(*kernel),
            TermConfig::NegEntropy { .. } => TermKind::NegEntropy,
            TermConfig::NonlinearDiffusion { m, .. } => TermKind::NonlinearDiffusion { m: *m },
            TermConfig::Divergence { divergence, .. } => TermKind::DivergenceToRef {
                kind: *divergence,
                reference: Reference { points: initial.points.clone(), weights: initial.weights.clone() },
            },
        };
        Term::new(self.coef(), kind)
    }
}

/// Runs the flow once per coefficient, replacing the coefficient of `term`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub term: usize,
    pub coefs: Vec<f64>,
}

/// Tensor grid with `n` points on `[lo, hi]` along every axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl GridSpec {
    pub fn validate(&self, field: &str) -> Result<()> {
        if !(self.lo < self.hi) || self.n < 2 {
            return Err(Error::ConfigInvalid(format!("{field}: need lo < hi and n >= 2")));
        }
        Ok(())
    }

    pub fn axis(&self) -> Array1<f64> {
        Array1::linspace(self.lo, self.hi, self.n)
    }

    /// All `n^d` grid points, last axis fastest.
    pub fn points(&self, d: usize) -> Array2<f64> {
        let axis = self.axis();
        let total = self.n.pow(d as u32);
        Array2::from_shape_fn((total, d), |(i, j)| {
            let stride = self.n.pow((d - 1 - j) as u32);
            axis[(i / stride) % self.n]
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// KDE bandwidth for density errors; `None` uses Silverman's rule.
    pub kde_bandwidth: Option<f64>,
    /// Points of the quadrature grid used to integrate the final density
    /// (1-D only); 0 skips the check.
    pub density_mass_points: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { kde_bandwidth: None, density_mass_points: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub initial: InitialLaw,
    pub terms: Vec<TermConfig>,
    #[serde(default)]
    pub reference: Option<AnalyticSolution>,
    #[serde(default)]
    pub sweep: Option<Sweep>,
    /// Evaluate the final log-density on this grid after the flow.
    #[serde(default)]
    pub density_grid: Option<GridSpec>,
    #[serde(default)]
    pub metrics: MetricsConfig,
    #[serde(default)]
    pub gradcheck: Option<GradcheckConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub format: u32,
    pub preset: Preset,
    pub solver: SolverConfig,
    pub problem: ProblemConfig,
}

fn gaussian_1d(mean: f64, var: f64) -> InitialLaw {
    InitialLaw::Gaussian { mean: vec![mean], var }
}

fn one_d_metrics() -> MetricsConfig {
    MetricsConfig { kde_bandwidth: None, density_mass_points: 401 }
}

impl RunConfig {
    /// Default configuration of a preset.
    pub fn preset(preset: Preset) -> Self {
        let base = SolverConfig::default();
        let (solver, problem) = match preset {
            Preset::Heat => (
                SolverConfig { steps: 250, particles: 2000, snapshot_stride: 25, ..base },
                ProblemConfig {
                    initial: gaussian_1d(0.0, 0.25),
                    terms: vec![TermConfig::NegEntropy { coef: 1.0 }],
                    reference: Some(AnalyticSolution::HeatGaussian { mean: 0.0, var: 0.25 }),
                    sweep: None,
                    density_grid: None,
                    metrics: one_d_metrics(),
                    gradcheck: None,
                },
            ),
            Preset::Advection => (
                SolverConfig { steps: 500, particles: 1000, snapshot_stride: 50, ..base },
                ProblemConfig {
                    initial: gaussian_1d(0.0, 0.25),
                    terms: vec![TermConfig::Potential { coef: 1.0, center: vec![2.0] }],
                    reference: Some(AnalyticSolution::AdvectionQuadratic { x0: vec![2.0] }),
                    sweep: None,
                    density_grid: None,
                    metrics: MetricsConfig::default(),
                    gradcheck: None,
                },
            ),
            Preset::PorousMedium => {
                let c = barenblatt_unit_c();
                (
                    SolverConfig { steps: 250, particles: 2000, snapshot_stride: 25, ..base },
                    ProblemConfig {
                        initial: InitialLaw::Barenblatt { m: 2.0, c, t0: BARENBLATT_T0 },
                        terms: vec![TermConfig::NonlinearDiffusion { coef: 1.0, m: 2.0 }],
                        reference: Some(AnalyticSolution::Barenblatt { m: 2.0, c, t0: BARENBLATT_T0 }),
                        sweep: None,
                        density_grid: None,
                        metrics: one_d_metrics(),
                        gradcheck: None,
                    },
                )
            }
            Preset::FokkerPlanck => (
                SolverConfig { steps: 1000, particles: 1000, snapshot_stride: 100, ..base },
                ProblemConfig {
                    initial: gaussian_1d(0.0, 0.2),
                    terms: vec![
                        TermConfig::Potential { coef: 1.0, center: vec![0.0] },
                        TermConfig::NonlinearDiffusion { coef: 1.0, m: 2.0 },
                    ],
                    reference: Some(AnalyticSolution::FokkerPlanckSteady {
                        m: 2.0,
                        center: 0.0,
                        c: fokker_planck_c(2.0, 1.0).expect("valid constants"),
                    }),
                    sweep: None,
                    density_grid: None,
                    metrics: one_d_metrics(),
                    gradcheck: None,
                },
            ),
            Preset::Aggregation => (
                SolverConfig { steps: 1000, particles: 1000, snapshot_stride: 100, ..base },
                ProblemConfig {
                    initial: gaussian_1d(0.0, 1.0),
                    terms: vec![TermConfig::Interaction { coef: 1.0, kernel: KernelFn::AttractRepulse }],
                    reference: Some(AnalyticSolution::AggregationSteady),
                    sweep: None,
                    density_grid: None,
                    metrics: MetricsConfig::default(),
                    gradcheck: None,
                },
            ),
            Preset::ControlledGeneration => (
                SolverConfig {
                    tau: 1e-4,
                    lr: 1e-3,
                    inner_iters: 500,
                    steps: 100,
                    warmstart: false,
                    particles: 1000,
                    snapshot_stride: 10,
                    hidden: vec![100, 100],
                    ..base
                },
                ProblemConfig {
                    initial: InitialLaw::GaussianMixture { means: vec![vec![-1.0, 0.0], vec![1.0, 0.0]], var: 0.1 },
                    terms: vec![
                        TermConfig::Potential { coef: CONTROLLED_LAMBDA1, center: vec![0.0, 2.0] },
                        TermConfig::Divergence { coef: 1e3, divergence: controlled_sinkhorn() },
                    ],
                    reference: None,
                    sweep: Some(Sweep { term: 1, coefs: vec![1e3, 1e4] }),
                    density_grid: None,
                    metrics: MetricsConfig::default(),
                    gradcheck: None,
                },
            ),
            Preset::DensityQuery => {
                let mut cfg = RunConfig::preset(Preset::Heat);
                cfg.preset = Preset::DensityQuery;
                cfg.solver.steps = 10;
                cfg.solver.particles = 500;
                cfg.solver.snapshot_stride = 10;
                cfg.problem.density_grid = Some(GridSpec { lo: -3.0, hi: 3.0, n: 121 });
                return cfg;
            }
            Preset::Gradcheck => (
                SolverConfig { steps: 0, hidden: vec![8, 8], ..base },
                ProblemConfig {
                    initial: gaussian_1d(0.0, 1.0),
                    terms: vec![],
                    reference: None,
                    sweep: None,
                    density_grid: None,
                    metrics: MetricsConfig::default(),
                    gradcheck: Some(GradcheckConfig::default()),
                },
            ),
        };
        RunConfig { format: CONFIG_FORMAT, preset, solver, problem }
    }

    /// Parse a user config, merging it over the defaults of its preset.
    /// `preset` overrides the file's `preset` field.
    pub fn from_json(text: &str, preset: Option<Preset>) -> Result<Self> {
        let user: Value = serde_json::from_str(text).map_err(|e| Error::ConfigInvalid(format!("config: {e}")))?;
        Self::from_value(user, preset)
    }

    pub fn from_value(mut user: Value, preset: Option<Preset>) -> Result<Self> {
        let obj = user.as_object_mut().ok_or_else(|| Error::ConfigInvalid("config: expected a JSON object".into()))?;
        if let Some(f) = obj.get("format") {
            if f.as_u64() != Some(CONFIG_FORMAT as u64) {
                return Err(Error::ConfigInvalid(format!(
                    "format: unsupported config format {f}, expected {CONFIG_FORMAT}"
                )));
            }
        }
        let preset = match (preset, obj.get("preset")) {
            (Some(p), _) => p,
            (None, Some(Value::String(s))) => s.parse()?,
            (None, Some(v)) => return Err(Error::ConfigInvalid(format!("preset: expected a string, got {v}"))),
            (None, None) => {
                return Err(Error::ConfigInvalid("preset: missing (set it in the config or pass --preset)".into()))
            }
        };
        obj.insert("preset".into(), Value::String(preset.name().into()));
        let mut merged = serde_json::to_value(RunConfig::preset(preset)).expect("config serializes");
        merge(&mut merged, user);
        let cfg: RunConfig = serde_path_to_error::deserialize(merged)
            .map_err(|e| Error::ConfigInvalid(format!("{}: {}", e.path(), e.inner())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let field = |f: &str, e: Error| match e {
            Error::ConfigInvalid(m) => Error::ConfigInvalid(format!("{f}: {m}")),
            e => Error::ConfigInvalid(format!("{f}: {e}")),
        };
        if self.format != CONFIG_FORMAT {
            return Err(Error::ConfigInvalid(format!("format: expected {CONFIG_FORMAT}, got {}", self.format)));
        }
        self.solver.validate().map_err(|e| field("solver", e))?;
        if self.solver.particles == 0 {
            return Err(Error::ConfigInvalid("solver.particles: must be at least 1".into()));
        }
        let p = &self.problem;
        p.initial.validate().map_err(|e| field("problem.initial", e))?;
        let d = p.initial.dim();
        if self.preset == Preset::Gradcheck {
            let g = p.gradcheck.clone().unwrap_or_default();
            return g.validate().map_err(|e| field("problem.gradcheck", e));
        }
        if p.terms.is_empty() {
            return Err(Error::ConfigInvalid("problem.terms: at least one term is required".into()));
        }
        for (i, t) in p.terms.iter().enumerate() {
            let spec = FunctionalSpec::new(vec![t.to_term(&ParticleCloud::new(Array2::zeros((1, d)))?)]);
            spec.validate(d).map_err(|e| field(&format!("problem.terms[{i}]"), e))?;
        }
        if let Some(s) = &p.sweep {
            if s.term >= p.terms.len() {
                return Err(Error::ConfigInvalid(format!("problem.sweep.term: index {} out of range", s.term)));
            }
            if s.coefs.is_empty() || s.coefs.iter().any(|c| !c.is_finite()) {
                return Err(Error::ConfigInvalid("problem.sweep.coefs: need at least one finite value".into()));
            }
        }
        if let Some(g) = &p.density_grid {
            g.validate("problem.density_grid")?;
            if d > 3 {
                return Err(Error::ConfigInvalid("problem.density_grid: grids are limited to d <= 3".into()));
            }
        }
        if let Some(bw) = p.metrics.kde_bandwidth {
            if !(bw > 0.0) {
                return Err(Error::ConfigInvalid("problem.metrics.kde_bandwidth: must be > 0".into()));
            }
        }
        if let Some(r) = &p.reference {
            let rd = match r {
                AnalyticSolution::AdvectionQuadratic { x0 } => x0.len(),
                _ => 1,
            };
            if rd != d {
                return Err(Error::ConfigInvalid(format!(
                    "problem.reference: reference is {rd}-D but the flow is {d}-D"
                )));
            }
        }
        Ok(())
    }

    /// `(label, coefficients)` of every flow the config runs.
    pub fn arms(&self) -> Vec<(String, Vec<TermConfig>)> {
        match &self.problem.sweep {
            None => vec![(String::new(), self.problem.terms.clone())],
            Some(s) => s
                .coefs
                .iter()
                .map(|&c| {
                    let mut terms = self.problem.terms.clone();
                    terms[s.term].set_coef(c);
                    (format!("term{}_coef_{c}", s.term), terms)
                })
                .collect(),
        }
    }

    /// Sample the initial cloud, with weights carrying the law's mass and
    /// `log ρ₀` at every particle.
    pub fn initial_cloud(&self) -> Result<ParticleCloud> {
        let law = &self.problem.initial;
        let stream = RngStream::new(self.solver.seed).substream(&[SAMPLE_TAG]);
        let points = law.sample(self.solver.particles, stream);
        let l0 = Array1::from_iter(points.rows().into_iter().map(|x| law.log_density(x)));
        ParticleCloud::new(points)?.with_mass(law.mass()).with_log_rho0(l0)
    }
}

/// `λ₁` of the controlled-generation preset, sized so the potential moves the
/// cloud appreciably within the flow time `Tτ = 10⁻²`.
pub const CONTROLLED_LAMBDA1: f64 = 1e3;

fn controlled_sinkhorn() -> DivergenceKind {
    DivergenceKind::Sinkhorn { eps: 5e-2, max_iter: 200, tol: 1e-4 }
}

/// Recursive object merge; values of different `kind` replace wholesale.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            let same_kind = match (b.get("kind"), o.get("kind")) {
                (Some(x), Some(y)) => x == y,
                _ => true,
            };
            if !same_kind {
                *b = o;
                return;
            }
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Functional of one arm, divergences measured against `initial`.
pub fn functional(terms: &[TermConfig], initial: &ParticleCloud) -> FunctionalSpec {
    FunctionalSpec::new(terms.iter().map(|t| t.to_term(initial)).collect())
}

/// `F(ρ_ref(·, t))` by quadrature for 1-D references and functionals built
/// from potential and internal-energy terms.
pub fn reference_energy(terms: &[TermConfig], reference: &AnalyticSolution, t: f64) -> Option<f64> {
    let (center, radius) = match reference {
        AnalyticSolution::Barenblatt { m, c, t0 } => (0.0, barenblatt_radius(t0 + t, *m, 1, *c)),
        AnalyticSolution::FokkerPlanckSteady { m, center, c } => (*center, (c * m / (m - 1.0)).sqrt()),
        AnalyticSolution::HeatGaussian { mean, var } => (*mean, 14.0 * (var + 2.0 * t).sqrt()),
        AnalyticSolution::AggregationSteady => (0.0, 2f64.sqrt()),
        AnalyticSolution::AdvectionQuadratic { .. } => return None,
    };
    let mut total = 0.0;
    for term in terms {
        let density = |x: f64| reference.density(x, t).unwrap_or(0.0);
        total += match term {
            TermConfig::Potential { coef, center: c } => {
                let v = PotentialFn::Quadratic { center: c.clone() };
                coef * arc_quadrature(radius, |y| {
                    let x = center + y;
                    v.value(ArrayView1::from(&[x][..])) * density(x)
                })
            }
            TermConfig::NegEntropy { coef } => {
                coef * arc_quadrature(radius, |y| {
                    let r = density(center + y);
                    if r > 0.0 {
                        r * r.ln()
                    } else {
                        0.0
                    }
                })
            }
            TermConfig::NonlinearDiffusion { coef, m } => {
                coef * arc_quadrature(radius, |y| density(center + y).powf(*m) / (m - 1.0))
            }
            TermConfig::Interaction { .. } | TermConfig::Divergence { .. } => return None,
        };
    }
    Some(total)
}
