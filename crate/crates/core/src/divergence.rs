//! Discrepancies between weighted point clouds with gradients in the
//! positions of the first cloud: squared MMD with a Gaussian kernel and the
//! debiased entropic Sinkhorn divergence.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

/// Value and gradient with respect to the first cloud's positions.
#[derive(Debug, Clone)]
pub struct DivergenceValue {
    pub value: f64,
    pub grad: Array2<f64>,
    /// `false` when Sinkhorn hit `max_iter` before reaching `tol`.
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DivergenceKind {
    /// `bandwidth = None` uses the median pairwise distance of the reference.
    Mmd {
        bandwidth: Option<f64>,
    },
    Sinkhorn {
        eps: f64,
        max_iter: usize,
        tol: f64,
    },
}

impl DivergenceKind {
    pub fn sinkhorn_default() -> Self {
        DivergenceKind::Sinkhorn { eps: 1e-2, max_iter: 2000, tol: 1e-6 }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            DivergenceKind::Mmd { bandwidth: Some(s) } if !(s > 0.0) => {
                Err(Error::ConfigInvalid("mmd bandwidth must be > 0".into()))
            }
            DivergenceKind::Sinkhorn { eps, tol, max_iter } if !(eps > 0.0) || !(tol > 0.0) || max_iter == 0 => {
                Err(Error::ConfigInvalid("sinkhorn needs eps > 0, tol > 0, max_iter >= 1".into()))
            }
            _ => Ok(()),
        }
    }
}

fn check_dims(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Result<()> {
    if a.ncols() != b.ncols() {
        return Err(Error::DimMismatch { expected: a.ncols(), got: b.ncols() });
    }
    Ok(())
}

fn sq_dists(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Array2<f64> {
    let rows = par::map_indices(x.nrows(), |i| {
        let xi = x.row(i);
        y.rows()
            .into_iter()
            .map(|yj| xi.iter().zip(yj).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .collect::<Vec<_>>()
    });
    Array2::from_shape_vec((x.nrows(), y.nrows()), rows.concat()).unwrap()
}

/// Median of pairwise Euclidean distances (distinct pairs).
pub fn median_bandwidth(points: ArrayView2<f64>) -> f64 {
    let n = points.nrows();
    let d2 = sq_dists(points, points);
    let mut ds: Vec<f64> =
        (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j))).map(|(i, j)| d2[[i, j]].sqrt()).collect();
    if ds.is_empty() {
        return 1.0;
    }
    ds.sort_by(f64::total_cmp);
    let m = ds.len();
    let med = if m % 2 == 1 { ds[m / 2] } else { 0.5 * (ds[m / 2 - 1] + ds[m / 2]) };
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

/// Kernel sums `Σᵢⱼ wᵢvⱼ k(xᵢ, yⱼ)` and, optionally, the gradient in `x`.
fn gauss_cross(
    x: ArrayView2<f64>,
    w: ArrayView1<f64>,
    y: ArrayView2<f64>,
    v: ArrayView1<f64>,
    sigma: f64,
    with_grad: bool,
) -> (f64, Array2<f64>) {
    let inv = 1.0 / (2.0 * sigma * sigma);
    let d = x.ncols();
    let rows = par::map_indices(x.nrows(), |i| {
        let xi = x.row(i);
        let mut s = Vec::with_capacity(y.nrows());
        let mut g = vec![0.0; if with_grad { d } else { 0 }];
        for (j, yj) in y.rows().into_iter().enumerate() {
            let r2: f64 = xi.iter().zip(yj).map(|(a, b)| (a - b) * (a - b)).sum();
            let k = v[j] * (-r2 * inv).exp();
            s.push(k);
            if with_grad {
                for c in 0..d {
                    g[c] -= k * (xi[c] - yj[c]) / (sigma * sigma);
                }
            }
        }
        (w[i] * par::pairwise_sum(&s), g.into_iter().map(|gc| w[i] * gc).collect::<Vec<_>>())
    });
    let vals: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let grad = if with_grad {
        Array2::from_shape_vec((x.nrows(), d), rows.into_iter().flat_map(|r| r.1).collect()).unwrap()
    } else {
        Array2::zeros((0, d))
    };
    (par::pairwise_sum(&vals), grad)
}

/// Squared MMD with Gaussian kernel `exp(−‖x−y‖²/(2σ²))`.
pub fn mmd_sq(
    a: ArrayView2<f64>,
    aw: ArrayView1<f64>,
    b: ArrayView2<f64>,
    bw: ArrayView1<f64>,
    sigma: f64,
) -> Result<DivergenceValue> {
    check_dims(&a, &b)?;
    let (kaa, gaa) = gauss_cross(a, aw, a, aw, sigma, true);
    let (kbb, _) = gauss_cross(b, bw, b, bw, sigma, false);
    let (kab, gab) = gauss_cross(a, aw, b, bw, sigma, true);
    let value = kaa + kbb - 2.0 * kab;
    // x appears in both slots of the A–A sum
    let grad = 2.0 * &gaa - 2.0 * &gab;
    Ok(DivergenceValue { value, grad, converged: true })
}

fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Dual potentials of one entropic OT problem.
#[derive(Debug, Clone, PartialEq)]
pub struct Potentials {
    pub f: Array1<f64>,
    pub g: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct OtSolution {
    pub value: f64,
    pub potentials: Potentials,
    pub iterations: usize,
    /// `Σᵢ |Σⱼ πᵢⱼ − aᵢ|` at termination (columns are exact after the last half-step).
    pub marginal_error: f64,
    pub converged: bool,
}

/// `−ε log Σⱼ wⱼ exp((potⱼ − Cᵢⱼ)/ε)` for every row `i` of `cost`.
fn c_transform(cost: &Array2<f64>, pot: &Array1<f64>, logw: &Array1<f64>, eps: f64) -> Array1<f64> {
    let shifted: Vec<f64> = pot.iter().zip(logw.iter()).map(|(p, lw)| lw + p / eps).collect();
    let out = par::map_indices(cost.nrows(), |i| {
        -eps * logsumexp(cost.row(i).iter().zip(&shifted).map(|(c, s)| s - c / eps))
    });
    Array1::from(out)
}

fn log_weights(w: ArrayView1<f64>) -> Array1<f64> {
    w.mapv(|v| if v > 0.0 { v.ln() } else { f64::NEG_INFINITY })
}

/// `Σᵢ aᵢ |exp((fᵢ − f̃ᵢ)/ε) − 1|`: the row-marginal error of a pair `(f, g)`
/// given the row transform `f̃ = T(g)`.
fn marginal_error(f: &Array1<f64>, f_next: &Array1<f64>, a: ArrayView1<f64>, eps: f64) -> f64 {
    let terms: Vec<f64> = (0..f.len()).map(|i| a[i] * (((f[i] - f_next[i]) / eps).exp() - 1.0).abs()).collect();
    par::pairwise_sum(&terms)
}

/// Log-domain Sinkhorn for `OT_ε(α, β)` with cost `‖x − y‖²`.
#[allow(clippy::too_many_arguments)]
pub fn sinkhorn(
    x: ArrayView2<f64>,
    a: ArrayView1<f64>,
    y: ArrayView2<f64>,
    b: ArrayView1<f64>,
    eps: f64,
    tol: f64,
    max_iter: usize,
    warm: Option<&Potentials>,
) -> Result<OtSolution> {
    check_dims(&x, &y)?;
    let cost = sq_dists(x, y);
    Ok(sinkhorn_cost(&cost, a, b, eps, tol, max_iter, warm))
}

fn sinkhorn_cost(
    cost: &Array2<f64>,
    a: ArrayView1<f64>,
    b: ArrayView1<f64>,
    eps: f64,
    tol: f64,
    max_iter: usize,
    warm: Option<&Potentials>,
) -> OtSolution {
    let (la, lb) = (log_weights(a), log_weights(b));
    let cost_t = cost.t().as_standard_layout().into_owned();
    let mut p = match warm {
        Some(w) if w.f.len() == cost.nrows() && w.g.len() == cost.ncols() => w.clone(),
        _ => {
            let f = Array1::zeros(cost.nrows());
            let g = c_transform(&cost_t, &f, &la, eps);
            Potentials { f, g }
        }
    };
    // each pass: row transform (which also measures the current pair's row
    // error), then the column transform
    let mut iterations = 0;
    let mut err;
    loop {
        let f_next = c_transform(cost, &p.g, &lb, eps);
        err = marginal_error(&p.f, &f_next, a, eps);
        if err <= tol || iterations >= max_iter {
            break;
        }
        p.f = f_next;
        p.g = c_transform(&cost_t, &p.f, &la, eps);
        iterations += 1;
    }
    let value = a.dot(&p.f) + b.dot(&p.g);
    OtSolution { value, potentials: p, iterations, marginal_error: err, converged: err <= tol }
}

/// Symmetric problem `OT_ε(α, α)` by averaged fixed-point updates.
fn sinkhorn_symmetric(
    cost: &Array2<f64>,
    a: ArrayView1<f64>,
    eps: f64,
    tol: f64,
    max_iter: usize,
    warm: Option<&Array1<f64>>,
) -> (Array1<f64>, bool, usize) {
    let la = log_weights(a);
    let mut f = match warm {
        Some(w) if w.len() == cost.nrows() => w.clone(),
        _ => Array1::zeros(cost.nrows()),
    };
    let mut iterations = 0;
    loop {
        let t = c_transform(cost, &f, &la, eps);
        if marginal_error(&f, &t, a, eps) <= tol {
            return (f, true, iterations);
        }
        if iterations >= max_iter {
            return (f, false, iterations);
        }
        f = (&f + &t) * 0.5;
        iterations += 1;
    }
}

/// Optimal plan `πᵢⱼ = aᵢbⱼ exp((fᵢ + gⱼ − Cᵢⱼ)/ε)`.
fn plan(cost: &Array2<f64>, p: &Potentials, a: ArrayView1<f64>, b: ArrayView1<f64>, eps: f64) -> Array2<f64> {
    let mut pi = cost.clone();
    for ((i, j), v) in pi.indexed_iter_mut() {
        *v = a[i] * b[j] * ((p.f[i] + p.g[j] - cost[[i, j]]) / eps).exp();
    }
    pi
}

/// `Σⱼ πᵢⱼ · 2(xᵢ − yⱼ)` for every `i`.
fn plan_grad(pi: &Array2<f64>, x: ArrayView2<f64>, y: ArrayView2<f64>) -> Array2<f64> {
    let mass = pi.sum_axis(Axis(1));
    let py = pi.dot(&y);
    let mut g = x.to_owned();
    for (mut row, m) in g.rows_mut().into_iter().zip(mass.iter()) {
        row *= *m;
    }
    (g - py) * 2.0
}

/// Warm-start state for repeated Sinkhorn divergence evaluations.
#[derive(Debug, Clone, Default)]
pub struct SinkhornWarm {
    pub ab: Option<Potentials>,
    pub aa: Option<Array1<f64>>,
    pub bb: Option<Array1<f64>>,
}

/// Debiased `S_ε(α, β) = OT_ε(α,β) − ½OT_ε(α,α) − ½OT_ε(β,β)`.
///
/// Non-convergence within `max_iter` is reported through
/// [`DivergenceValue::converged`], not as an error.
pub fn sinkhorn_divergence(
    a: ArrayView2<f64>,
    aw: ArrayView1<f64>,
    b: ArrayView2<f64>,
    bw: ArrayView1<f64>,
    eps: f64,
    tol: f64,
    max_iter: usize,
) -> Result<DivergenceValue> {
    sinkhorn_divergence_warm(a, aw, b, bw, eps, tol, max_iter, &mut SinkhornWarm::default())
}

#[allow(clippy::too_many_arguments)]
pub fn sinkhorn_divergence_warm(
    a: ArrayView2<f64>,
    aw: ArrayView1<f64>,
    b: ArrayView2<f64>,
    bw: ArrayView1<f64>,
    eps: f64,
    tol: f64,
    max_iter: usize,
    warm: &mut SinkhornWarm,
) -> Result<DivergenceValue> {
    check_dims(&a, &b)?;
    let cab = sq_dists(a, b);
    let caa = sq_dists(a, a);
    let cbb = sq_dists(b, b);
    let ab = sinkhorn_cost(&cab, aw, bw, eps, tol, max_iter, warm.ab.as_ref());
    let (faa, conv_aa, _) = sinkhorn_symmetric(&caa, aw, eps, tol, max_iter, warm.aa.as_ref());
    let (fbb, conv_bb, _) = sinkhorn_symmetric(&cbb, bw, eps, tol, max_iter, warm.bb.as_ref());
    let ot_aa = 2.0 * aw.dot(&faa);
    let ot_bb = 2.0 * bw.dot(&fbb);
    let value = ab.value - 0.5 * ot_aa - 0.5 * ot_bb;

    let pi_ab = plan(&cab, &ab.potentials, aw, bw, eps);
    let paa = Potentials { f: faa.clone(), g: faa.clone() };
    let pi_aa = plan(&caa, &paa, aw, aw, eps);
    let grad = plan_grad(&pi_ab, a, b) - plan_grad(&pi_aa, a, a);

    let converged = ab.converged && conv_aa && conv_bb;
    if !converged {
        log::debug!("sinkhorn stopped at max_iter={max_iter} (marginal error {:.3e})", ab.marginal_error);
    }
    warm.ab = Some(ab.potentials);
    warm.aa = Some(faa);
    warm.bb = Some(fbb);
    Ok(DivergenceValue { value, grad, converged })
}
