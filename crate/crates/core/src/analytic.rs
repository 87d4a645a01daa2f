//! Closed-form reference solutions, steady states, and initial laws.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::functionals::PotentialFn;
use crate::numcore::RngStream;

/// Start time of porous-medium flows (the profile is singular at `t = 0`).
pub const BARENBLATT_T0: f64 = 0.25;

/// `C` giving a unit-mass profile for `d = 1`, `m = 2`.
pub fn barenblatt_unit_c() -> f64 {
    3f64.cbrt() / 4.0
}

/// The constant `(3/16)^{1/3}`; its `d = 1`, `m = 2` profile has mass 2.
pub fn barenblatt_reference_c() -> f64 {
    (3.0f64 / 16.0).cbrt()
}

/// `(α, β, k)` of the Barenblatt profile.
pub fn barenblatt_exponents(m: f64, d: usize) -> (f64, f64, f64) {
    let df = d as f64;
    let alpha = df / (df * (m - 1.0) + 2.0);
    let beta = alpha / df;
    let k = alpha * (m - 1.0) / (2.0 * m * df);
    (alpha, beta, k)
}

/// `t^{−α} (C − k‖x‖² t^{−2β})₊^{1/(m−1)}`.
pub fn barenblatt_density(x: ArrayView1<f64>, t: f64, m: f64, c: f64) -> f64 {
    let (alpha, beta, k) = barenblatt_exponents(m, x.len());
    let inner = c - k * x.dot(&x) * t.powf(-2.0 * beta);
    if inner <= 0.0 {
        return 0.0;
    }
    t.powf(-alpha) * inner.powf(1.0 / (m - 1.0))
}

/// Radius of the Barenblatt support at time `t`.
pub fn barenblatt_radius(t: f64, m: f64, d: usize, c: f64) -> f64 {
    let (_, beta, k) = barenblatt_exponents(m, d);
    (c / k).sqrt() * t.powf(beta)
}

/// `(C − ((m−1)/m) V(x))₊^{1/(m−1)}`.
pub fn fokker_planck_steady(x: ArrayView1<f64>, m: f64, v: &PotentialFn, c: f64) -> f64 {
    let inner = c - (m - 1.0) / m * v.value(x);
    if inner <= 0.0 {
        0.0
    } else {
        inner.powf(1.0 / (m - 1.0))
    }
}

/// `∫_{−r}^{r} f(x) dx` by composite Simpson in `x = r sin θ`, which removes
/// the square-root behaviour of compactly supported profiles at the edges.
pub(crate) fn arc_quadrature<F: Fn(f64) -> f64>(r: f64, f: F) -> f64 {
    use std::f64::consts::{FRAC_PI_2, PI};
    let n = 4000;
    let h = PI / n as f64;
    let g = |th: f64| f(r * th.sin()) * r * th.cos().max(0.0);
    let mut acc = g(-FRAC_PI_2) + g(FRAC_PI_2);
    for i in 1..n {
        acc += if i % 2 == 1 { 4.0 } else { 2.0 } * g(-FRAC_PI_2 + i as f64 * h);
    }
    acc * h / 3.0
}

/// Mass of the 1-D steady state for `V = (x − x₀)²`.
fn fokker_planck_mass_1d(m: f64, c: f64) -> f64 {
    let r = (c * m / (m - 1.0)).sqrt();
    let v = PotentialFn::square(1);
    arc_quadrature(r, |x| fokker_planck_steady(Array1::from(vec![x]).view(), m, &v, c))
}

/// Solve for `C` such that the 1-D steady state with `V = (x − x₀)²` has the
/// given mass, by bisection on the quadrature mass.
pub fn fokker_planck_c(m: f64, mass: f64) -> Result<f64> {
    if !(m > 1.0) || !(mass > 0.0) {
        return Err(Error::ConfigInvalid(format!("need m > 1 and mass > 0, got m = {m}, mass = {mass}")));
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    while fokker_planck_mass_1d(m, hi) < mass {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if fokker_planck_mass_1d(m, mid) < mass {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// `(1/π) √((2 − x²)₊)`.
pub fn aggregation_steady(x: f64) -> f64 {
    (2.0 - x * x).max(0.0).sqrt() / std::f64::consts::PI
}

/// Density of `N(μ, σ² + 2t)` in 1-D.
pub fn heat_gaussian(x: f64, t: f64, mu: f64, var: f64) -> f64 {
    let s2 = var + 2.0 * t;
    (-(x - mu).powi(2) / (2.0 * s2)).exp() / (2.0 * std::f64::consts::PI * s2).sqrt()
}

/// `x₀ + (x − x₀) e^{−2t}`: exact particle path for `V = ‖x − x₀‖²`.
pub fn advection_position(x_init: ArrayView1<f64>, t: f64, x0: ArrayView1<f64>) -> Array1<f64> {
    let decay = (-2.0 * t).exp();
    &x0 + &((&x_init - &x0) * decay)
}

/// Reference solution attached to a flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AnalyticSolution {
    Barenblatt { m: f64, c: f64, t0: f64 },
    FokkerPlanckSteady { m: f64, center: f64, c: f64 },
    AggregationSteady,
    HeatGaussian { mean: f64, var: f64 },
    AdvectionQuadratic { x0: Vec<f64> },
}

impl AnalyticSolution {
    /// 1-D reference density after flow time `t`, where one exists.
    pub fn density(&self, x: f64, t: f64) -> Option<f64> {
        let xv = Array1::from(vec![x]);
        match self {
            AnalyticSolution::Barenblatt { m, c, t0 } => Some(barenblatt_density(xv.view(), t0 + t, *m, *c)),
            AnalyticSolution::FokkerPlanckSteady { m, center, c } => {
                Some(fokker_planck_steady(xv.view(), *m, &PotentialFn::Quadratic { center: vec![*center] }, *c))
            }
            AnalyticSolution::AggregationSteady => Some(aggregation_steady(x)),
            AnalyticSolution::HeatGaussian { mean, var } => Some(heat_gaussian(x, t, *mean, *var)),
            AnalyticSolution::AdvectionQuadratic { .. } => None,
        }
    }
}

/// Initial laws with sampling and closed-form log-density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialLaw {
    /// Isotropic Gaussian `N(mean, var·I)`.
    Gaussian { mean: Vec<f64>, var: f64 },
    /// 1-D Barenblatt profile at time `t0`; its mass follows from `c`.
    Barenblatt { m: f64, c: f64, t0: f64 },
    /// Equal-weight isotropic Gaussian mixture.
    GaussianMixture { means: Vec<Vec<f64>>, var: f64 },
}

impl InitialLaw {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        match self {
            InitialLaw::Gaussian { mean, var } if mean.is_empty() || !(*var > 0.0) => {
                bad("gaussian law needs a nonempty mean and var > 0".into())
            }
            InitialLaw::Barenblatt { m, c, t0 } if !(*m > 1.0 && *c > 0.0 && *t0 > 0.0) => {
                bad(format!("barenblatt law needs m > 1, c > 0, t0 > 0 (got {m}, {c}, {t0})"))
            }
            InitialLaw::GaussianMixture { means, var } => {
                let d = means.first().map_or(0, Vec::len);
                if d == 0 || means.iter().any(|v| v.len() != d) || !(*var > 0.0) {
                    bad("mixture needs equal-length nonempty means and var > 0".into())
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            InitialLaw::Gaussian { mean, .. } => mean.len(),
            InitialLaw::Barenblatt { .. } => 1,
            InitialLaw::GaussianMixture { means, .. } => means.first().map_or(0, Vec::len),
        }
    }

    /// Total mass of the law's density.
    pub fn mass(&self) -> f64 {
        match self {
            InitialLaw::Barenblatt { m, c, t0 } => barenblatt_mass_1d(*m, *c, *t0),
            _ => 1.0,
        }
    }

    /// `n` independent draws (rows).
    pub fn sample(&self, n: usize, stream: RngStream) -> Array2<f64> {
        let d = self.dim();
        let mut rng = stream.rng();
        let normal = |r: &mut rand_chacha::ChaCha8Rng| -> f64 { StandardNormal.sample(r) };
        match self {
            InitialLaw::Gaussian { mean, var } => {
                let sd = var.sqrt();
                Array2::from_shape_fn((n, d), |(_, j)| mean[j] + sd * normal(&mut rng))
            }
            InitialLaw::Barenblatt { m, c, t0 } => {
                let r = barenblatt_radius(*t0, *m, 1, *c);
                let peak = barenblatt_density(Array1::zeros(1).view(), *t0, *m, *c);
                let mut out = Array2::zeros((n, 1));
                for i in 0..n {
                    loop {
                        let x = r * (2.0 * rng.random::<f64>() - 1.0);
                        let p = barenblatt_density(Array1::from(vec![x]).view(), *t0, *m, *c);
                        if rng.random::<f64>() * peak < p {
                            out[[i, 0]] = x;
                            break;
                        }
                    }
                }
                out
            }
            InitialLaw::GaussianMixture { means, var } => {
                let sd = var.sqrt();
                let mut out = Array2::zeros((n, d));
                for i in 0..n {
                    let k = rng.random_range(0..means.len());
                    for j in 0..d {
                        out[[i, j]] = means[k][j] + sd * normal(&mut rng);
                    }
                }
                out
            }
        }
    }

    /// Log-density of the (possibly non-unit mass) law at `x`.
    pub fn log_density(&self, x: ArrayView1<f64>) -> f64 {
        match self {
            InitialLaw::Gaussian { mean, var } => gaussian_log_density(x, mean, *var),
            InitialLaw::Barenblatt { m, c, t0 } => barenblatt_density(x, *t0, *m, *c).ln(),
            InitialLaw::GaussianMixture { means, var } => {
                let logs: Vec<f64> = means.iter().map(|mu| gaussian_log_density(x, mu, *var)).collect();
                let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                top + logs.iter().map(|l| (l - top).exp()).sum::<f64>().ln() - (means.len() as f64).ln()
            }
        }
    }
}

fn gaussian_log_density(x: ArrayView1<f64>, mean: &[f64], var: f64) -> f64 {
    let d = x.len() as f64;
    let r2: f64 = x.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
    -0.5 * r2 / var - 0.5 * d * (2.0 * std::f64::consts::PI * var).ln()
}

/// Mass of the 1-D Barenblatt profile (time-invariant).
pub fn barenblatt_mass_1d(m: f64, c: f64, t: f64) -> f64 {
    let r = barenblatt_radius(t, m, 1, c);
    arc_quadrature(r, |x| barenblatt_density(Array1::from(vec![x]).view(), t, m, c))
}

#[cfg(test)]
mod tests;
