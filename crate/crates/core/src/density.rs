//! Density of a flowed measure at arbitrary points: invert the chain of maps
//! through convex conjugates, then replay it forward summing log-Jacobians.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::analytic::InitialLaw;
use crate::cloud::ParticleCloud;
use crate::error::{Error, Result};
use crate::icnn::{Icnn, JetSpec};
use crate::logdet::{hessian_matvec, logdet_value_slq, LogdetConfig, LogdetMode};
use crate::numcore::{cholesky, cholesky_logdet, cholesky_solve, RngStream};
use crate::par;

pub const INVERT_TOL: f64 = 1e-8;
pub const INVERT_MAX_ITER: usize = 200;

fn norm(v: &Array1<f64>) -> f64 {
    v.dot(v).sqrt()
}

/// `(u(x), ∇u(x), H_u(x))` from one jet pass.
fn local_model(u: &Icnn, x: ArrayView1<f64>) -> Result<(f64, Array1<f64>, Array2<f64>)> {
    let d = u.dim();
    let spec = JetSpec::hessian(d);
    let pts = x.to_owned().insert_axis(Axis(0));
    let (out, _) = u.jets(pts.view(), &spec, None, false)?;
    Ok((out.value[0], out.first.row(0).to_owned(), spec.hessian_of(&out, 0)))
}

/// `∇u*(y)`: the `x` with `∇u(x) = y`, by damped Newton on the residual with
/// a gradient-ascent fallback on `⟨y, x⟩ − u(x)`. Starts from `y`.
pub fn invert_map(u: &Icnn, y: ArrayView1<f64>, tol: f64, max_iter: usize) -> Result<Array1<f64>> {
    let d = u.dim();
    if y.len() != d {
        return Err(Error::DimMismatch { expected: d, got: y.len() });
    }
    let mut x = y.to_owned();
    let (mut val, g, mut h) = local_model(u, x.view())?;
    let mut r = &g - &y;
    let mut rn = norm(&r);
    for _ in 0..max_iter {
        if rn <= tol {
            return Ok(x);
        }
        let newton = cholesky(h.view()).ok().map(|l| -cholesky_solve(l.view(), r.view()));
        let mut moved = false;
        if let Some(dx) = newton {
            let mut t = 1.0;
            for _ in 0..40 {
                let cand = &x + &(&dx * t);
                let (cv, cg, ch) = local_model(u, cand.view())?;
                let cr = &cg - &y;
                let crn = norm(&cr);
                if crn < rn {
                    (x, val, h, r, rn) = (cand, cv, ch, cr, crn);
                    moved = true;
                    break;
                }
                t *= 0.5;
            }
        }
        if !moved {
            // ascent on the conjugate objective: minimize u(x) − ⟨y, x⟩
            let phi = val - y.dot(&x);
            let mut t = 1.0;
            for _ in 0..60 {
                let cand = &x - &(&r * t);
                let (cv, cg, ch) = local_model(u, cand.view())?;
                if cv - y.dot(&cand) < phi - 1e-4 * t * rn * rn {
                    let cr = &cg - &y;
                    rn = norm(&cr);
                    (x, val, h, r) = (cand, cv, ch, cr);
                    moved = true;
                    break;
                }
                t *= 0.5;
            }
        }
        if !moved {
            break;
        }
    }
    if rn <= tol {
        Ok(x)
    } else {
        Err(Error::NotConverged { what: "map inversion".into(), iterations: max_iter, residual: rn })
    }
}

/// Source of `log ρ₀` at arbitrary points.
pub trait LogDensitySource: Sync {
    fn log_density(&self, x: ArrayView1<f64>) -> f64;
}

impl LogDensitySource for InitialLaw {
    fn log_density(&self, x: ArrayView1<f64>) -> f64 {
        InitialLaw::log_density(self, x)
    }
}

/// Isotropic Gaussian KDE of a sample, for initial laws without closed form.
#[derive(Debug, Clone)]
pub struct KdeSource {
    pub points: Array2<f64>,
    pub weights: Array1<f64>,
    pub bandwidth: f64,
}

impl KdeSource {
    /// Scott-type bandwidth `σ̄ n^{−1/(d+4)}` when none is given.
    pub fn from_cloud(cloud: &ParticleCloud, bandwidth: Option<f64>) -> Self {
        let n = cloud.len() as f64;
        let d = cloud.dim() as f64;
        let h = bandwidth.unwrap_or_else(|| {
            let sd = cloud.variance().mean().unwrap_or(1.0).sqrt();
            let h = sd * n.powf(-1.0 / (d + 4.0));
            if h > 0.0 {
                h
            } else {
                1.0
            }
        });
        Self { points: cloud.origin.clone(), weights: cloud.weights.clone(), bandwidth: h }
    }
}

impl LogDensitySource for KdeSource {
    fn log_density(&self, x: ArrayView1<f64>) -> f64 {
        let d = x.len() as f64;
        let h2 = self.bandwidth * self.bandwidth;
        let logs: Vec<f64> = self
            .points
            .rows()
            .into_iter()
            .zip(&self.weights)
            .map(|(p, w)| {
                let r2: f64 = p.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
                w.ln() - 0.5 * r2 / h2
            })
            .collect();
        let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = logs.iter().map(|l| (l - top).exp()).sum();
        top + s.ln() - 0.5 * d * (2.0 * std::f64::consts::PI * h2).ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensityConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub logdet: LogdetConfig,
    pub seed: u64,
}

impl Default for DensityConfig {
    fn default() -> Self {
        Self { tol: INVERT_TOL, max_iter: INVERT_MAX_ITER, logdet: LogdetConfig::default(), seed: 0 }
    }
}

/// Result of one density query.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityEval {
    pub log_density: f64,
    /// Preimage of the query under the whole chain.
    pub origin: Array1<f64>,
    /// `‖T(origin) − x‖∞` after the forward replay.
    pub roundtrip_error: f64,
}

fn logdet_at(u: &Icnn, x: ArrayView1<f64>, cfg: &DensityConfig, stream: RngStream) -> Result<f64> {
    let d = u.dim();
    match cfg.logdet.resolved_mode(d) {
        LogdetMode::Exact => Ok(cholesky_logdet(u.hessian_x(x)?.view())?.0),
        LogdetMode::Stochastic => logdet_value_slq(hessian_matvec(u, x), d, &cfg.logdet, stream),
    }
}

/// `log ρ_T(x) = log ρ₀(y₀) − Σₛ log|H_{uₛ}(yₛ₋₁)|` where `y₀` is the preimage
/// of `x` and `yₛ = ∇uₛ(yₛ₋₁)` is the forward replay.
pub fn log_density_eval(
    x: ArrayView1<f64>,
    maps: &[Icnn],
    rho0: &dyn LogDensitySource,
    cfg: &DensityConfig,
) -> Result<DensityEval> {
    let mut y = x.to_owned();
    for (s, u) in maps.iter().enumerate().rev() {
        y = invert_map(u, y.view(), cfg.tol, cfg.max_iter).map_err(|e| match e {
            Error::NotConverged { iterations, residual, .. } => {
                Error::NotConverged { what: format!("inversion of map {}", s + 1), iterations, residual }
            }
            e => e,
        })?;
    }
    let origin = y.clone();
    let stream = RngStream::new(cfg.seed);
    let mut total = 0.0;
    for (s, u) in maps.iter().enumerate() {
        total += logdet_at(u, y.view(), cfg, stream.substream(&[s as u64]))?;
        y = u.grad_x(y.view())?;
    }
    let roundtrip_error = (&y - &x).iter().fold(0.0f64, |a, b| a.max(b.abs()));
    Ok(DensityEval { log_density: rho0.log_density(origin.view()) - total, origin, roundtrip_error })
}

pub fn log_density(x: ArrayView1<f64>, maps: &[Icnn], rho0: &dyn LogDensitySource, cfg: &DensityConfig) -> Result<f64> {
    log_density_eval(x, maps, rho0, cfg).map(|e| e.log_density)
}

/// [`log_density_eval`] at every row of `points`.
pub fn log_density_batch(
    points: ArrayView2<f64>,
    maps: &[Icnn],
    rho0: &dyn LogDensitySource,
    cfg: &DensityConfig,
) -> Result<Vec<DensityEval>> {
    par::map_indices(points.nrows(), |i| log_density_eval(points.row(i), maps, rho0, cfg)).into_iter().collect()
}

#[cfg(test)]
mod tests;
