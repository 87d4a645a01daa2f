//! Gradient and estimator diagnostics on random networks.

use ndarray::{Array1, Array2};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cloud::ParticleCloud;
use crate::error::{Error, Result};
use crate::functionals::{
    interaction_term, neg_entropy_surrogate, nonlinear_diffusion_surrogate, potential_term, transport_cost,
    FunctionalSpec, KernelFn, PotentialFn, Term, TermKind,
};
use crate::icnn::{init_random, Icnn, LossNode};
use crate::jko::SolverConfig;
use crate::logdet::{logdet_grad_stochastic, logdet_value_slq, LogdetConfig};
use crate::numcore::{cholesky_logdet, finite_diff_grad, rel_err, sym_eigen, RngStream};
use crate::par;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub dims: Vec<usize>,
    pub particles: usize,
    pub fd_step: f64,
    pub tolerance: f64,
    /// Probes averaged for the Hutchinson gradient check (`d = 2`).
    pub hutchinson_probes: usize,
    pub hutchinson_tolerance: f64,
    /// Dimensions of the random SPD matrices for the SLQ check.
    pub slq_dims: Vec<usize>,
    pub slq_probes: usize,
    pub slq_cond: f64,
    pub slq_tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            dims: vec![1, 2],
            particles: 16,
            fd_step: 1e-6,
            tolerance: 1e-4,
            hutchinson_probes: 10_000,
            hutchinson_tolerance: 0.02,
            slq_dims: vec![4, 16, 32],
            slq_probes: 32,
            slq_cond: 1e3,
            slq_tolerance: 0.01,
        }
    }
}

impl GradcheckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() || self.dims.contains(&0) || self.particles == 0 {
            return Err(Error::ConfigInvalid("dims and particles must be nonempty and positive".into()));
        }
        if !(self.fd_step > 0.0) || !(self.tolerance > 0.0) || !(self.slq_cond >= 1.0) {
            return Err(Error::ConfigInvalid("fd_step and tolerance must be > 0, slq_cond >= 1".into()));
        }
        if self.slq_dims.contains(&0) || self.slq_probes == 0 {
            return Err(Error::ConfigInvalid("slq dims and probes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub check: String,
    pub dim: usize,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl CheckResult {
    fn new(check: &str, dim: usize, value: f64, tolerance: f64) -> Self {
        Self { check: check.into(), dim, value, tolerance, pass: value <= tolerance }
    }
}

fn gaussian_cloud(n: usize, d: usize, stream: RngStream) -> Result<ParticleCloud> {
    let mut rng = stream.rng();
    let pts = Array2::from_shape_fn((n, d), |_| StandardNormal.sample(&mut rng));
    let l0 = Array1::from_iter(
        pts.rows().into_iter().map(|x| -0.5 * x.dot(&x) - 0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln()),
    );
    ParticleCloud::new(pts)?.with_log_rho0(l0)
}

fn with_theta(net: &Icnn, theta: &[f64]) -> Icnn {
    Icnn { arch: net.arch.clone(), params: net.params.with_flat(theta).expect("same length") }
}

/// Exact value of a one-term functional after pushing `cloud` through `∇u`.
fn pushed_energy(kind: &TermKind, cloud: &ParticleCloud, net: &Icnn) -> Result<f64> {
    let (g, hs) = net.grad_hess_batch(cloud.points.view())?;
    let ld: Vec<f64> = hs.iter().map(|h| cholesky_logdet(h.view()).map(|r| r.0)).collect::<Result<_>>()?;
    let pushed = cloud.push_forward(g, Some(Array1::from(ld).view()))?;
    FunctionalSpec::new(vec![Term::new(1.0, kind.clone())]).exact_value(&pushed)
}

fn surrogate_vs_fd<S, O>(net: &Icnn, h: f64, surrogate: S, oracle: O) -> Result<f64>
where
    S: Fn(&Icnn) -> Result<LossNode>,
    O: Fn(&Icnn) -> Result<f64>,
{
    let theta = net.params.to_flat();
    let analytic = surrogate(net)?.param_grad(net)?;
    let fd = finite_diff_grad(|t| oracle(&with_theta(net, t)).unwrap_or(f64::NAN), &theta, h);
    Ok(rel_err(&analytic, &fd, 1e-8))
}

/// Random SPD matrix with eigenvalues log-spaced on `[1, cond]`.
fn random_spd(d: usize, cond: f64, stream: RngStream) -> Result<Array2<f64>> {
    let mut rng = stream.rng();
    let g = Array2::from_shape_fn((d, d), |_| StandardNormal.sample(&mut rng));
    let (_, q) = sym_eigen((&g + &g.t()).view())?;
    let lam = Array1::from_iter((0..d).map(|i| cond.powf(if d > 1 { i as f64 / (d - 1) as f64 } else { 0.0 })));
    Ok(q.dot(&Array2::from_diag(&lam)).dot(&q.t()))
}

/// Analytic parameter gradients of every surrogate against finite
/// differences of the exact pushed energies, the Hutchinson log-determinant
/// gradient against finite differences of the Cholesky log-determinant, and
/// SLQ against Cholesky on random SPD matrices.
pub fn run_gradcheck(cfg: &GradcheckConfig, solver: &SolverConfig) -> Result<Vec<CheckResult>> {
    cfg.validate()?;
    let root = RngStream::new(solver.seed).substream(&[0x4743]);
    let exact = LogdetConfig::exact();
    let h = cfg.fd_step;
    let mut out = Vec::new();
    for &d in &cfg.dims {
        let net = init_random(&solver.arch(d), root.substream(&[d as u64, 0]));
        let cloud = gaussian_cloud(cfg.particles, d, root.substream(&[d as u64, 1]))?;
        let v = PotentialFn::Quadratic { center: vec![0.3; d] };
        let tau = solver.tau;
        let stream = root.substream(&[d as u64, 2]);
        let checks: Vec<(&str, f64)> = vec![
            (
                "potential",
                surrogate_vs_fd(
                    &net,
                    h,
                    |n| potential_term(&cloud, n, &v),
                    |n| pushed_energy(&TermKind::Potential(v.clone()), &cloud, n),
                )?,
            ),
            (
                "interaction_quadratic",
                surrogate_vs_fd(
                    &net,
                    h,
                    |n| interaction_term(&cloud, n, KernelFn::Quadratic),
                    |n| pushed_energy(&TermKind::Interaction(KernelFn::Quadratic), &cloud, n),
                )?,
            ),
            (
                "interaction_attract_repulse",
                surrogate_vs_fd(
                    &net,
                    h,
                    |n| interaction_term(&cloud, n, KernelFn::AttractRepulse),
                    |n| pushed_energy(&TermKind::Interaction(KernelFn::AttractRepulse), &cloud, n),
                )?,
            ),
            (
                "neg_entropy",
                surrogate_vs_fd(
                    &net,
                    h,
                    |n| neg_entropy_surrogate(&cloud, n, &exact, stream),
                    |n| pushed_energy(&TermKind::NegEntropy, &cloud, n),
                )?,
            ),
            (
                "nonlinear_diffusion_m2",
                surrogate_vs_fd(
                    &net,
                    h,
                    |n| nonlinear_diffusion_surrogate(&cloud, n, 2.0, &exact, stream),
                    |n| pushed_energy(&TermKind::NonlinearDiffusion { m: 2.0 }, &cloud, n),
                )?,
            ),
            (
                "transport",
                surrogate_vs_fd(
                    &net,
                    h,
                    |n| transport_cost(&cloud, n, tau),
                    |n| {
                        let g = n.grad_batch(cloud.points.view())?;
                        let diff = &g - &cloud.points;
                        Ok((0..cloud.len()).map(|i| cloud.weights[i] * diff.row(i).dot(&diff.row(i))).sum::<f64>()
                            / (2.0 * tau))
                    },
                )?,
            ),
        ];
        out.extend(checks.into_iter().map(|(name, e)| CheckResult::new(name, d, e, cfg.tolerance)));
    }

    if cfg.hutchinson_probes > 0 {
        let d = 2;
        let net = init_random(&solver.arch(d), root.substream(&[0x48, 0]));
        let x = Array1::from(vec![0.4, -0.7]);
        let theta = net.params.to_flat();
        let fd = finite_diff_grad(
            |t| {
                let n = with_theta(&net, t);
                n.hessian_x(x.view()).and_then(|hm| cholesky_logdet(hm.view())).map(|r| r.0).unwrap_or(f64::NAN)
            },
            &theta,
            h,
        );
        let cfg1 = LogdetConfig::stochastic(1);
        let stream = root.substream(&[0x48, 1]);
        let parts = par::map_chunks(cfg.hutchinson_probes, 256, |lo, hi| -> Result<Vec<f64>> {
            let mut acc = vec![0.0; theta.len()];
            for k in lo..hi {
                let g =
                    logdet_grad_stochastic(&net, x.view(), &cfg1, stream.substream(&[k as u64]))?.param_grad(&net)?;
                acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            }
            Ok(acc)
        });
        let parts: Vec<Vec<f64>> = parts.into_iter().collect::<Result<_>>()?;
        let mean: Vec<f64> = par::tree_reduce_vecs(parts).iter().map(|v| v / cfg.hutchinson_probes as f64).collect();
        out.push(CheckResult::new("hutchinson_logdet_grad", d, rel_err(&mean, &fd, 1e-8), cfg.hutchinson_tolerance));
    }

    let slq_cfg = LogdetConfig { slq_probes: cfg.slq_probes, ..LogdetConfig::default() };
    for &d in &cfg.slq_dims {
        let a = random_spd(d, cfg.slq_cond, root.substream(&[0x53, d as u64]))?;
        let exact = cholesky_logdet(a.view())?.0;
        let est = logdet_value_slq(|v| a.dot(&v), d, &slq_cfg, root.substream(&[0x53, d as u64, 1]))?;
        out.push(CheckResult::new("slq_logdet", d, (est - exact).abs() / exact.abs().max(1e-12), cfg.slq_tolerance));
    }
    Ok(out)
}
