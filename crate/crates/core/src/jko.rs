//! Outer JKO loop: fit a convex potential per step, push the cloud through
//! its gradient, and accumulate log-Jacobians.

use std::time::Instant;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::cloud::ParticleCloud;
use crate::error::{Error, Result};
use crate::functionals::{FunctionalSpec, JetNeed, Pushforward, WarmState};
use crate::icnn::{init_identity_like, ConvexityMode, Icnn, IcnnArch, IcnnParams, INIT_NOISE};
use crate::logdet::{slq_batch, LogdetConfig, LogdetMode, EXACT_MAX_DIM};
use crate::numcore::RngStream;
use crate::optim::{AdamConfig, AdamState};

/// How `cum_logdet` is advanced after each push.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LogdetTracking {
    /// Cholesky when `d ≤ 8`, otherwise skipped.
    #[default]
    Auto,
    Exact,
    Slq,
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub tau: f64,
    /// Inner Adam learning rate `η`.
    pub lr: f64,
    pub inner_iters: usize,
    pub steps: usize,
    pub warmstart: bool,
    pub particles: usize,
    pub seed: u64,
    pub logdet: LogdetConfig,
    pub snapshot_stride: usize,
    pub hidden: Vec<usize>,
    pub convexity: ConvexityMode,
    pub init_noise: f64,
    pub track_logdet: LogdetTracking,
    /// Reject a fitted map whose exact objective is worse than the identity's.
    pub descent_gate: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tau: 1e-3,
            lr: 1e-3,
            inner_iters: 400,
            steps: 100,
            warmstart: true,
            particles: 1000,
            seed: 0,
            logdet: LogdetConfig::default(),
            snapshot_stride: 10,
            hidden: vec![100, 20],
            convexity: ConvexityMode::QuadraticSkip,
            init_noise: INIT_NOISE,
            track_logdet: LogdetTracking::Auto,
            descent_gate: true,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::ConfigInvalid(m.to_string()));
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return bad("tau must be positive");
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("lr must be positive");
        }
        if self.inner_iters == 0 {
            return bad("inner_iters must be at least 1");
        }
        if self.particles == 0 {
            return bad("particles must be at least 1");
        }
        if self.snapshot_stride == 0 {
            return bad("snapshot_stride must be at least 1");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden widths must be nonempty and positive");
        }
        if !(self.init_noise >= 0.0) {
            return bad("init_noise must be nonnegative");
        }
        self.logdet.validate()
    }

    pub fn arch(&self, d: usize) -> IcnnArch {
        IcnnArch::new(d, &self.hidden).with_mode(self.convexity)
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, ..AdamConfig::default() }
    }

    fn tracking(&self, d: usize) -> LogdetTracking {
        match self.track_logdet {
            LogdetTracking::Auto if d <= EXACT_MAX_DIM => LogdetTracking::Exact,
            LogdetTracking::Auto => LogdetTracking::Off,
            t => t,
        }
    }
}

/// Per-step summary of the inner optimization.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepReport {
    pub step: usize,
    /// Surrogate loss at every inner iteration (before the update).
    pub losses: Vec<f64>,
    /// Exact objective of the returned map, when computable.
    pub objective: Option<f64>,
    /// Exact objective of the identity map `F̂(ρ_t)`.
    pub identity_objective: Option<f64>,
    pub transport: f64,
    pub accepted: bool,
    pub best_iteration: usize,
}

fn identity_net(arch: &IcnnArch) -> Icnn {
    init_identity_like(arch, RngStream::new(0), 0.0)
}

const STEP_TAG: u64 = 0x4a4b_4f00;

type Best = Option<(f64, IcnnParams, usize)>;

fn consider(best: &mut Best, obj: Option<f64>, params: &IcnnParams, it: usize) {
    if let Some(o) = obj.filter(|o| o.is_finite()) {
        if best.as_ref().is_none_or(|(b, _, _)| o < *b) {
            *best = Some((o, params.clone(), it));
        }
    }
}

/// One JKO step from `init`: `n_u` Adam iterations on surrogate plus transport
/// cost, convexity clipping after each update, then the push.
pub fn jko_step(
    cloud: &ParticleCloud,
    functional: &FunctionalSpec,
    config: &SolverConfig,
    init: Icnn,
    step: usize,
) -> Result<(Icnn, ParticleCloud, StepReport)> {
    let d = cloud.dim();
    if init.dim() != d {
        return Err(Error::DimMismatch { expected: d, got: init.dim() });
    }
    functional.validate(d)?;
    let need = functional.need();
    if need == JetNeed::Hessian && !init.arch.is_smooth() {
        return Err(Error::UnsupportedComposition("entropy-type terms need a smooth activation".into()));
    }
    let stream = RngStream::new(config.seed).substream(&[STEP_TAG, step as u64]);
    let want_ld = functional.wants_logdet_values();
    let mut warm = WarmState::default();
    let mut net = init;
    let mut adam = AdamState::new(net.params.n_params(), config.adam());
    let mut theta = net.params.to_flat();
    let mut losses = Vec::with_capacity(config.inner_iters);
    let mut best: Best = None;

    for it in 0..=config.inner_iters {
        let (pf, tape) = Pushforward::compute(
            &net,
            cloud.points.view(),
            need,
            &config.logdet,
            stream.substream(&[it as u64]),
            want_ld,
            it < config.inner_iters,
        )
        .inspect_err(|e| log::error!("step {step}, inner iteration {it}: {e}"))?;
        let ev = functional.evaluate(cloud, &pf, config.tau, &mut warm)?;
        if !ev.surrogate.is_finite() {
            return Err(Error::NonFiniteLoss { step, iteration: it });
        }
        consider(&mut best, ev.objective, &net.params, it);
        if it == config.inner_iters {
            break;
        }
        losses.push(ev.surrogate);
        let tape = tape.expect("tape requested");
        let grad = net.backward(&tape, &ev.adjoint)?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss { step, iteration: it });
        }
        adam.step(&mut theta, &grad)?;
        net.params.set_flat(&theta)?;
        net.params.clip_convexity();
        theta = net.params.to_flat();
    }

    let (mut net, best_iteration) = match best {
        Some((_, p, it)) => (Icnn { arch: net.arch.clone(), params: p }, it),
        None => (net, config.inner_iters),
    };

    // exact objective of the chosen map and of the identity
    let tracking = config.tracking(d);
    let exact_cfg = LogdetConfig { mode: Some(LogdetMode::Exact), ..config.logdet };
    let final_need = if tracking == LogdetTracking::Exact { JetNeed::Hessian } else { need };
    let final_cfg = if tracking == LogdetTracking::Exact { &exact_cfg } else { &config.logdet };
    let (pf, _) = Pushforward::compute(
        &net,
        cloud.points.view(),
        final_need,
        final_cfg,
        stream.substream(&[u64::MAX]),
        want_ld,
        false,
    )?;
    let ev = functional.evaluate(cloud, &pf, config.tau, &mut warm)?;
    let identity_objective = functional.exact_value(cloud).ok();
    let mut accepted = true;
    if config.descent_gate {
        if let (Some(o), Some(o0)) = (ev.objective, identity_objective) {
            if o > o0 {
                log::debug!("step {step}: fitted map raises the objective ({o} > {o0}), keeping the identity");
                accepted = false;
            }
        }
    }

    let (next, objective, transport) = if accepted {
        let logdets = match tracking {
            LogdetTracking::Exact => pf.logdet.clone().map(Array1::from),
            LogdetTracking::Slq => Some(Array1::from(slq_batch(
                &net,
                cloud.points.view(),
                &config.logdet,
                stream.substream(&[u64::MAX - 1]),
            )?)),
            _ => None,
        };
        (cloud.push_forward(pf.grads().to_owned(), logdets.as_ref().map(|l| l.view()))?, ev.objective, ev.transport)
    } else {
        net = identity_net(&net.arch);
        (cloud.clone(), identity_objective, 0.0)
    };
    let report = StepReport { step, losses, objective, identity_objective, transport, accepted, best_iteration };
    Ok((net, next, report))
}

/// One recorded outer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    /// The map applied at this step (`None` for the initial record).
    pub params: Option<IcnnParams>,
    /// `F̂(ρ_t)` per term after the step.
    pub terms: Vec<f64>,
    pub energy: f64,
    pub transport: f64,
    pub accepted: bool,
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowTrajectory {
    pub arch: IcnnArch,
    pub records: Vec<StepRecord>,
    /// `(step, cloud)` at the snapshot stride, always including the first and last.
    pub snapshots: Vec<(usize, ParticleCloud)>,
    pub final_cloud: ParticleCloud,
}

impl FlowTrajectory {
    /// Maps applied so far, in order.
    pub fn maps(&self) -> Vec<Icnn> {
        self.records
            .iter()
            .filter_map(|r| r.params.clone().map(|p| Icnn { arch: self.arch.clone(), params: p }))
            .collect()
    }
}

fn exact_terms_or_nan(functional: &FunctionalSpec, cloud: &ParticleCloud) -> Vec<f64> {
    functional.exact_terms(cloud).unwrap_or_else(|_| vec![f64::NAN; functional.terms.len()])
}

/// Run `T` JKO steps from `cloud`, calling `observe` after every step.
pub fn run_flow_observed<F>(
    cloud: ParticleCloud,
    functional: &FunctionalSpec,
    config: &SolverConfig,
    mut observe: F,
) -> Result<FlowTrajectory>
where
    F: FnMut(&StepRecord, &ParticleCloud, &StepReport),
{
    config.validate()?;
    let d = cloud.dim();
    functional.validate(d)?;
    let arch = config.arch(d);
    arch.validate()?;
    let init_stream = RngStream::new(config.seed).substream(&[STEP_TAG + 1]);

    let terms = exact_terms_or_nan(functional, &cloud);
    let mut records = vec![StepRecord {
        step: 0,
        params: None,
        energy: terms.iter().sum(),
        terms,
        transport: 0.0,
        accepted: true,
        wall_time: 0.0,
    }];
    let mut snapshots = vec![(0, cloud.clone())];
    let mut current = cloud;
    let mut prev: Option<Icnn> = None;
    let start = Instant::now();

    for step in 1..=config.steps {
        let init = match (&prev, config.warmstart) {
            (Some(p), true) => p.clone(),
            _ => init_identity_like(&arch, init_stream.substream(&[step as u64]), config.init_noise),
        };
        let (net, next, report) = jko_step(&current, functional, config, init, step)?;
        let terms = exact_terms_or_nan(functional, &next);
        let record = StepRecord {
            step,
            params: Some(net.params.clone()),
            energy: terms.iter().sum(),
            terms,
            transport: report.transport,
            accepted: report.accepted,
            wall_time: start.elapsed().as_secs_f64(),
        };
        observe(&record, &next, &report);
        if step % config.snapshot_stride == 0 || step == config.steps {
            snapshots.push((step, next.clone()));
        }
        records.push(record);
        prev = Some(net);
        current = next;
    }
    Ok(FlowTrajectory { arch, records, snapshots, final_cloud: current })
}

pub fn run_flow(cloud: ParticleCloud, functional: &FunctionalSpec, config: &SolverConfig) -> Result<FlowTrajectory> {
    run_flow_observed(cloud, functional, config, |_, _, _| {})
}
