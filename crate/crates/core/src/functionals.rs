//! Energy functionals on pushforwards of particle clouds.
//!
//! Every term is evaluated on the jets of `u` at the current particles and
//! contributes a value plus an adjoint with respect to those jets; the network
//! backward pass turns the summed adjoint into a parameter gradient.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::cloud::ParticleCloud;
use crate::divergence::{median_bandwidth, mmd_sq, sinkhorn_divergence_warm, DivergenceKind, SinkhornWarm};
use crate::error::{Error, Result};
use crate::icnn::{Icnn, JetAdjoint, JetOutput, JetSpec, LossGraph, LossNode, Tape};
use crate::logdet::{exact_from_jets, slq_batch, solve_probes, LogdetConfig, LogdetMode};
use crate::numcore::RngStream;
use crate::par;

/// Closed-form convex potentials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum PotentialFn {
    /// `‖x − center‖²`.
    Quadratic { center: Vec<f64> },
}

impl PotentialFn {
    /// `‖x‖²` in dimension `d`.
    pub fn square(d: usize) -> Self {
        PotentialFn::Quadratic { center: vec![0.0; d] }
    }

    pub fn value(&self, x: ArrayView1<f64>) -> f64 {
        match self {
            PotentialFn::Quadratic { center } => x.iter().zip(center).map(|(a, c)| (a - c) * (a - c)).sum(),
        }
    }

    pub fn grad(&self, x: ArrayView1<f64>) -> Array1<f64> {
        match self {
            PotentialFn::Quadratic { center } => Array1::from_iter(x.iter().zip(center).map(|(a, c)| 2.0 * (a - c))),
        }
    }

    fn dim(&self) -> usize {
        match self {
            PotentialFn::Quadratic { center } => center.len(),
        }
    }
}

/// Closed-form even interaction kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFn {
    /// `‖z‖²`.
    Quadratic,
    /// `½‖z‖² − log‖z‖`.
    AttractRepulse,
}

impl KernelFn {
    pub fn singular_at_zero(self) -> bool {
        matches!(self, KernelFn::AttractRepulse)
    }

    pub fn value(self, z: ArrayView1<f64>) -> f64 {
        let r2 = z.dot(&z);
        match self {
            KernelFn::Quadratic => r2,
            KernelFn::AttractRepulse => 0.5 * r2 - 0.5 * r2.ln(),
        }
    }

    pub fn grad(self, z: ArrayView1<f64>) -> Array1<f64> {
        let (_, c) = self.radial(z.dot(&z));
        &z * c
    }

    /// `(W, c)` with `W(z) = φ(‖z‖²)` and `∇W(z) = c·z`.
    #[inline]
    fn radial(self, r2: f64) -> (f64, f64) {
        match self {
            KernelFn::Quadratic => (r2, 2.0),
            KernelFn::AttractRepulse => (0.5 * r2 - 0.5 * r2.ln(), 1.0 - 1.0 / r2),
        }
    }
}

/// Reference measure for divergence terms.
#[derive(Debug, Clone, PartialEq)]
pub struct Reference {
    pub points: Array2<f64>,
    pub weights: Array1<f64>,
}

impl Reference {
    pub fn uniform(points: Array2<f64>) -> Self {
        let n = points.nrows();
        Self { points, weights: Array1::from_elem(n, 1.0 / n as f64) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TermKind {
    Potential(PotentialFn),
    Interaction(KernelFn),
    NegEntropy,
    NonlinearDiffusion { m: f64 },
    DivergenceToRef { kind: DivergenceKind, reference: Reference },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    pub coef: f64,
    pub kind: TermKind,
}

impl Term {
    pub fn new(coef: f64, kind: TermKind) -> Self {
        Self { coef, kind }
    }

    pub fn label(&self) -> &'static str {
        match self.kind {
            TermKind::Potential(_) => "potential",
            TermKind::Interaction(_) => "interaction",
            TermKind::NegEntropy => "neg_entropy",
            TermKind::NonlinearDiffusion { .. } => "nonlinear_diffusion",
            TermKind::DivergenceToRef { .. } => "divergence",
        }
    }
}

/// Weighted sum of energy terms.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FunctionalSpec {
    pub terms: Vec<Term>,
}

/// Which jets a functional reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum JetNeed {
    Gradient,
    Hessian,
}

impl FunctionalSpec {
    pub fn new(terms: Vec<Term>) -> Self {
        Self { terms }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        for t in &self.terms {
            if !t.coef.is_finite() {
                return Err(Error::ConfigInvalid(format!("{} coefficient must be finite", t.label())));
            }
            match &t.kind {
                TermKind::NonlinearDiffusion { m } if !(*m > 1.0) => {
                    return Err(Error::ConfigInvalid(format!("nonlinear diffusion needs m > 1, got {m}")))
                }
                TermKind::Potential(v) if v.dim() != d => return Err(Error::DimMismatch { expected: d, got: v.dim() }),
                TermKind::DivergenceToRef { kind, reference } => {
                    kind.validate()?;
                    if reference.points.ncols() != d {
                        return Err(Error::DimMismatch { expected: d, got: reference.points.ncols() });
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn need(&self) -> JetNeed {
        if self.terms.iter().any(|t| matches!(t.kind, TermKind::NegEntropy | TermKind::NonlinearDiffusion { .. })) {
            JetNeed::Hessian
        } else {
            JetNeed::Gradient
        }
    }

    fn has_diffusion(&self) -> bool {
        self.terms.iter().any(|t| matches!(t.kind, TermKind::NonlinearDiffusion { .. }))
    }
}

/// Jets of `u` at a cloud's particles, plus log-determinant data when the
/// functional needs Hessians.
pub struct Pushforward {
    pub points: Array2<f64>,
    pub spec: JetSpec,
    pub extra_dirs: Option<Array3<f64>>,
    pub jets: JetOutput,
    /// `log|Hᵢ|`: exact, or SLQ estimates in stochastic mode when requested.
    pub logdet: Option<Vec<f64>>,
    /// `Hᵢ⁻¹` in exact mode.
    pub hinv: Option<Vec<Array2<f64>>>,
    /// Hutchinson probes per particle in stochastic mode.
    pub probes: usize,
}

impl Pushforward {
    /// Evaluate the jets of `net` at `points`.
    ///
    /// `want_logdet` forces `log|Hᵢ|` values in stochastic mode (SLQ); exact
    /// mode always has them.
    pub fn compute(
        net: &Icnn,
        points: ArrayView2<f64>,
        need: JetNeed,
        config: &LogdetConfig,
        stream: RngStream,
        want_logdet: bool,
        keep_tape: bool,
    ) -> Result<(Self, Option<Tape>)> {
        let d = net.dim();
        match (need, config.resolved_mode(d)) {
            (JetNeed::Gradient, _) => {
                let spec = JetSpec::gradient(d);
                let (jets, tape) = net.jets(points, &spec, None, keep_tape)?;
                let pf = Self {
                    points: points.to_owned(),
                    spec,
                    extra_dirs: None,
                    jets,
                    logdet: None,
                    hinv: None,
                    probes: 0,
                };
                Ok((pf, tape))
            }
            (JetNeed::Hessian, LogdetMode::Exact) => {
                let spec = JetSpec::hessian(d);
                let (jets, tape) = net.jets(points, &spec, None, keep_tape)?;
                let (ld, hinv) = exact_from_jets(&spec, &jets)?;
                let pf = Self {
                    points: points.to_owned(),
                    spec,
                    extra_dirs: None,
                    jets,
                    logdet: Some(ld),
                    hinv: Some(hinv),
                    probes: 0,
                };
                Ok((pf, tape))
            }
            (JetNeed::Hessian, LogdetMode::Stochastic) => {
                let p = config.probes;
                let (dirs, stats) = solve_probes(net, points, p, config, stream.substream(&[0]))?;
                if stats.unconverged > 0 {
                    log::debug!("{} of {} CG solves hit the iteration cap", stats.unconverged, stats.solves);
                }
                let spec = JetSpec::probes(d, p);
                let (jets, tape) = net.jets(points, &spec, Some(dirs.view()), keep_tape)?;
                let logdet =
                    if want_logdet { Some(slq_batch(net, points, config, stream.substream(&[1]))?) } else { None };
                let pf = Self {
                    points: points.to_owned(),
                    spec,
                    extra_dirs: Some(dirs),
                    jets,
                    logdet,
                    hinv: None,
                    probes: p,
                };
                Ok((pf, tape))
            }
        }
    }

    pub fn len(&self) -> usize {
        self.jets.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    /// `∇u(xᵢ)` for every particle.
    pub fn grads(&self) -> ArrayView2<'_, f64> {
        self.jets.first.slice(s![.., ..self.dim()])
    }

    fn logdets(&self) -> Result<&[f64]> {
        self.logdet
            .as_deref()
            .ok_or_else(|| Error::UnsupportedComposition("log-determinant values were not computed".into()))
    }

    /// Add `scale · ∂ log|Hᵢ| / ∂θ` for every particle, with per-particle scales.
    fn add_logdet_adjoint(&self, adj: &mut JetAdjoint, scales: &[f64]) -> Result<()> {
        if let Some(hinv) = &self.hinv {
            for (i, (h, &c)) in hinv.iter().zip(scales).enumerate() {
                self.spec.add_hessian_adjoint(adj, i, (h * c).view());
            }
            Ok(())
        } else if self.probes > 0 {
            let p = self.probes as f64;
            for (i, &c) in scales.iter().enumerate() {
                adj.second.row_mut(i).mapv_inplace(|v| v + c / p);
            }
            Ok(())
        } else {
            Err(Error::UnsupportedComposition("log-determinant terms need Hessian jets".into()))
        }
    }

    /// Wrap an adjoint into a loss node over these jets.
    pub fn node(&self, value: f64, adjoint: JetAdjoint) -> LossNode {
        LossNode {
            value,
            graph: LossGraph {
                points: self.points.clone(),
                spec: self.spec.clone(),
                extra_dirs: self.extra_dirs.clone(),
                adjoint,
            },
        }
    }
}

/// Sinkhorn potentials carried across inner iterations, one slot per term.
#[derive(Debug, Clone, Default)]
pub struct WarmState {
    pub sinkhorn: Vec<Option<SinkhornWarm>>,
}

fn potential_values(
    pf: &Pushforward,
    v: &PotentialFn,
    weights: ArrayView1<f64>,
    coef: f64,
    adj: &mut JetAdjoint,
) -> f64 {
    let g = pf.grads();
    let d = pf.dim();
    let vals: Vec<f64> = (0..pf.len()).map(|i| weights[i] * v.value(g.row(i))).collect();
    for i in 0..pf.len() {
        let dv = v.grad(g.row(i));
        let mut row = adj.first.slice_mut(s![i, ..d]);
        row.scaled_add(coef * weights[i], &dv);
    }
    par::pairwise_sum(&vals)
}

fn interaction_values(
    y: ArrayView2<f64>,
    w: KernelFn,
    weights: ArrayView1<f64>,
    want_grad: bool,
) -> Result<(f64, Array2<f64>)> {
    let n = y.nrows();
    let d = y.ncols();
    let skip_self = w.singular_at_zero();
    let y = y.as_standard_layout();
    let ys = y.as_slice().expect("standard layout");
    let rows = par::map_indices(n, |i| -> Result<(f64, Vec<f64>)> {
        let mut acc = 0.0;
        let mut g = vec![0.0; if want_grad { d } else { 0 }];
        let yi = &ys[i * d..(i + 1) * d];
        for j in 0..n {
            if skip_self && i == j {
                continue;
            }
            let yj = &ys[j * d..(j + 1) * d];
            let r2: f64 = yi.iter().zip(yj).map(|(a, b)| (a - b) * (a - b)).sum();
            let (v, c) = w.radial(r2);
            if !v.is_finite() {
                return Err(Error::SingularKernel(i, j));
            }
            let ww = weights[i] * weights[j];
            acc += ww * v;
            if want_grad {
                for k in 0..d {
                    g[k] += ww * c * (yi[k] - yj[k]);
                }
            }
        }
        Ok((0.5 * acc, g))
    });
    let mut vals = Vec::with_capacity(n);
    let mut grad = Array2::<f64>::zeros((n, if want_grad { d } else { 0 }));
    for (i, r) in rows.into_iter().enumerate() {
        let (v, g) = r?;
        vals.push(v);
        if want_grad {
            grad.row_mut(i).assign(&Array1::from(g));
        }
    }
    Ok((par::pairwise_sum(&vals), grad))
}

/// `½ Σᵢⱼ wᵢwⱼ W(yᵢ − yⱼ)` at fixed positions (self-pairs skipped when `W`
/// is singular at the origin).
pub fn interaction_energy(y: ArrayView2<f64>, weights: ArrayView1<f64>, w: KernelFn) -> Result<f64> {
    interaction_values(y, w, weights, false).map(|(v, _)| v)
}

fn divergence_values(
    y: ArrayView2<f64>,
    weights: ArrayView1<f64>,
    kind: &DivergenceKind,
    reference: &Reference,
    warm: &mut SinkhornWarm,
) -> Result<(f64, Array2<f64>)> {
    let r = match *kind {
        DivergenceKind::Mmd { bandwidth } => {
            let sigma = bandwidth.unwrap_or_else(|| median_bandwidth(reference.points.view()));
            mmd_sq(y, weights, reference.points.view(), reference.weights.view(), sigma)?
        }
        DivergenceKind::Sinkhorn { eps, max_iter, tol } => sinkhorn_divergence_warm(
            y,
            weights,
            reference.points.view(),
            reference.weights.view(),
            eps,
            tol,
            max_iter,
            warm,
        )?,
    };
    Ok((r.value, r.grad))
}

/// Outcome of evaluating a functional plus the transport cost at one set of
/// network parameters.
#[derive(Debug, Clone)]
pub struct Evaluation {
    /// Surrogate loss whose gradient is `adjoint`.
    pub surrogate: f64,
    /// Exact objective `F̂((∇u)♯ρ) + W₂²/(2τ)`, when computable.
    pub objective: Option<f64>,
    /// Exact value of every term after the push (same order as the spec).
    pub terms: Vec<Option<f64>>,
    pub transport: f64,
    pub adjoint: JetAdjoint,
}

/// `Σᵢ wᵢ f(ξᵢ)/ξᵢ`, with `ξᵢ` the log-density after the map when `extra`
/// log-determinants are given.
fn power_energy(log_xi: &Array1<f64>, weights: ArrayView1<f64>, m: f64) -> f64 {
    let vals: Vec<f64> = log_xi.iter().zip(weights).map(|(lx, w)| w * ((m - 1.0) * lx).exp() / (m - 1.0)).collect();
    par::pairwise_sum(&vals)
}

fn entropy_energy(log_xi: &Array1<f64>, weights: ArrayView1<f64>) -> f64 {
    let vals: Vec<f64> = log_xi.iter().zip(weights).map(|(lx, w)| w * lx).collect();
    par::pairwise_sum(&vals)
}

/// Log-density each particle would carry after the candidate push. Without a
/// known `ρ₀` the entropy is reported up to the constant `Σ wᵢ log ρ₀(xᵢ⁰)`.
fn log_xi_after(cloud: &ParticleCloud, logdet: &[f64], require_rho0: bool) -> Result<Array1<f64>> {
    let ld = Array1::from(logdet.to_vec());
    match &cloud.log_rho0 {
        Some(l0) => Ok(l0 - &cloud.cum_logdet - &ld),
        None if !require_rho0 => Ok(-&cloud.cum_logdet - &ld),
        None => Err(Error::DensityUnavailable("nonlinear diffusion needs log ρ₀ at the particles".into())),
    }
}

impl FunctionalSpec {
    /// Surrogate loss, exact monitored objective, and jet adjoint of
    /// `F((∇u)♯ρ) + (1/2τ) Σ wᵢ‖∇u(xᵢ) − xᵢ‖²`.
    pub fn evaluate(
        &self,
        cloud: &ParticleCloud,
        pf: &Pushforward,
        tau: f64,
        warm: &mut WarmState,
    ) -> Result<Evaluation> {
        let n = pf.len();
        let weights = cloud.weights.view();
        let g = pf.grads().to_owned();
        let mut adj = JetOutput::zeros(n, &pf.spec);
        let mut surrogate = Vec::with_capacity(self.terms.len() + 1);
        let mut terms = Vec::with_capacity(self.terms.len());
        warm.sinkhorn.resize(self.terms.len(), None);
        let d = pf.dim();

        for (ti, term) in self.terms.iter().enumerate() {
            let c = term.coef;
            match &term.kind {
                TermKind::Potential(v) => {
                    let val = potential_values(pf, v, weights, c, &mut adj);
                    surrogate.push(c * val);
                    terms.push(Some(c * val));
                }
                TermKind::Interaction(w) => {
                    let (val, grad) = interaction_values(g.view(), *w, weights, true)?;
                    adj.first.slice_mut(s![.., ..d]).scaled_add(c, &grad);
                    surrogate.push(c * val);
                    terms.push(Some(c * val));
                }
                TermKind::DivergenceToRef { kind, reference } => {
                    let slot = warm.sinkhorn[ti].get_or_insert_with(SinkhornWarm::default);
                    let (val, grad) = divergence_values(g.view(), weights, kind, reference, slot)?;
                    adj.first.slice_mut(s![.., ..d]).scaled_add(c, &grad);
                    surrogate.push(c * val);
                    terms.push(Some(c * val));
                }
                TermKind::NegEntropy => {
                    let scales: Vec<f64> = weights.iter().map(|w| -c * w).collect();
                    pf.add_logdet_adjoint(&mut adj, &scales)?;
                    match pf.logdet.as_deref() {
                        Some(ld) => {
                            let vals: Vec<f64> = ld.iter().zip(weights).map(|(l, w)| -w * l).collect();
                            surrogate.push(c * par::pairwise_sum(&vals));
                            terms.push(Some(c * entropy_energy(&log_xi_after(cloud, ld, false)?, weights)));
                        }
                        None => terms.push(None),
                    }
                }
                TermKind::NonlinearDiffusion { m } => {
                    let ld = pf.logdets()?;
                    let log_xi = log_xi_after(cloud, ld, true)?;
                    let ci: Vec<f64> = log_xi.iter().map(|lx| ((m - 1.0) * lx).exp()).collect();
                    let scales: Vec<f64> = ci.iter().zip(weights).map(|(ci, w)| -c * w * ci).collect();
                    pf.add_logdet_adjoint(&mut adj, &scales)?;
                    let vals: Vec<f64> = scales.iter().zip(ld).map(|(s, l)| s * l).collect();
                    surrogate.push(par::pairwise_sum(&vals));
                    terms.push(Some(c * power_energy(&log_xi, weights, *m)));
                }
            }
        }

        let diff = &g - &pf.points;
        let tvals: Vec<f64> = (0..n).map(|i| weights[i] * diff.row(i).dot(&diff.row(i))).collect();
        let transport = par::pairwise_sum(&tvals) / (2.0 * tau);
        for i in 0..n {
            adj.first.slice_mut(s![i, ..d]).scaled_add(weights[i] / tau, &diff.row(i));
        }
        surrogate.push(transport);

        let objective = terms.iter().copied().sum::<Option<f64>>().map(|f| f + transport);
        Ok(Evaluation { surrogate: surrogate.iter().sum(), objective, terms, transport, adjoint: adj })
    }

    /// Exact term values of a cloud state (positions and `cum_logdet` already
    /// include every applied map).
    pub fn exact_terms(&self, cloud: &ParticleCloud) -> Result<Vec<f64>> {
        let weights = cloud.weights.view();
        let zero = vec![0.0; cloud.len()];
        self.terms
            .iter()
            .map(|term| {
                let c = term.coef;
                Ok(c * match &term.kind {
                    TermKind::Potential(v) => {
                        let vals: Vec<f64> =
                            cloud.points.rows().into_iter().zip(weights).map(|(x, w)| w * v.value(x)).collect();
                        par::pairwise_sum(&vals)
                    }
                    TermKind::Interaction(w) => interaction_energy(cloud.points.view(), weights, *w)?,
                    TermKind::DivergenceToRef { kind, reference } => {
                        divergence_values(cloud.points.view(), weights, kind, reference, &mut SinkhornWarm::default())?
                            .0
                    }
                    TermKind::NegEntropy => entropy_energy(&log_xi_after(cloud, &zero, false)?, weights),
                    TermKind::NonlinearDiffusion { m } => power_energy(&log_xi_after(cloud, &zero, true)?, weights, *m),
                })
            })
            .collect()
    }

    /// `F̂` of a cloud state.
    pub fn exact_value(&self, cloud: &ParticleCloud) -> Result<f64> {
        Ok(self.exact_terms(cloud)?.iter().sum())
    }

    /// Whether the SLQ values are needed in stochastic mode.
    pub fn wants_logdet_values(&self) -> bool {
        self.has_diffusion()
    }
}

fn single_term_node(
    cloud: &ParticleCloud,
    net: &Icnn,
    kind: TermKind,
    config: &LogdetConfig,
    stream: RngStream,
) -> Result<LossNode> {
    let spec = FunctionalSpec::new(vec![Term::new(1.0, kind)]);
    spec.validate(net.dim())?;
    let (pf, _) =
        Pushforward::compute(net, cloud.points.view(), spec.need(), config, stream, spec.wants_logdet_values(), false)?;
    let ev = spec.evaluate(cloud, &pf, 1.0, &mut WarmState::default())?;
    // drop the transport contribution that evaluate always adds
    let mut adj = ev.adjoint;
    let diff = &pf.grads() - &pf.points;
    let d = pf.dim();
    for i in 0..pf.len() {
        adj.first.slice_mut(s![i, ..d]).scaled_add(-cloud.weights[i], &diff.row(i));
    }
    Ok(pf.node(ev.surrogate - ev.transport, adj))
}

/// `Σᵢ wᵢ V(∇u(xᵢ))`.
pub fn potential_term(cloud: &ParticleCloud, net: &Icnn, v: &PotentialFn) -> Result<LossNode> {
    single_term_node(cloud, net, TermKind::Potential(v.clone()), &LogdetConfig::default(), RngStream::new(0))
}

/// `½ Σᵢⱼ wᵢwⱼ W(∇u(xᵢ) − ∇u(xⱼ))`.
pub fn interaction_term(cloud: &ParticleCloud, net: &Icnn, w: KernelFn) -> Result<LossNode> {
    single_term_node(cloud, net, TermKind::Interaction(w), &LogdetConfig::default(), RngStream::new(0))
}

/// `−Σᵢ wᵢ log|H_u(xᵢ)|`.
pub fn neg_entropy_surrogate(
    cloud: &ParticleCloud,
    net: &Icnn,
    config: &LogdetConfig,
    stream: RngStream,
) -> Result<LossNode> {
    single_term_node(cloud, net, TermKind::NegEntropy, config, stream)
}

/// `−Σᵢ wᵢ cᵢ log|H_u(xᵢ)|` with `cᵢ = ξᵢ'^{m−1}` held constant.
pub fn nonlinear_diffusion_surrogate(
    cloud: &ParticleCloud,
    net: &Icnn,
    m: f64,
    config: &LogdetConfig,
    stream: RngStream,
) -> Result<LossNode> {
    single_term_node(cloud, net, TermKind::NonlinearDiffusion { m }, config, stream)
}

/// `(1/2τ) Σᵢ wᵢ ‖∇u(xᵢ) − xᵢ‖²`.
pub fn transport_cost(cloud: &ParticleCloud, net: &Icnn, tau: f64) -> Result<LossNode> {
    let (pf, _) = Pushforward::compute(
        net,
        cloud.points.view(),
        JetNeed::Gradient,
        &LogdetConfig::default(),
        RngStream::new(0),
        false,
        false,
    )?;
    let ev = FunctionalSpec::zero().evaluate(cloud, &pf, tau, &mut WarmState::default())?;
    Ok(pf.node(ev.transport, ev.adjoint))
}

/// `Σᵢ wᵢ f(ξᵢ)/ξᵢ` with `ξᵢ = exp(log ρ₀(xᵢ⁰) − cum_logdetᵢ)`.
pub fn internal_energy_exact<F: Fn(f64) -> f64>(cloud: &ParticleCloud, f: F) -> Result<f64> {
    let log_xi = cloud.log_xi()?;
    let vals: Vec<f64> = log_xi
        .iter()
        .zip(cloud.weights.iter())
        .map(|(lx, w)| {
            let xi = lx.exp();
            w * f(xi) / xi
        })
        .collect();
    Ok(par::pairwise_sum(&vals))
}

#[cfg(test)]
mod tests;
