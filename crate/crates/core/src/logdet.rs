//! Hessian log-determinants: exact values by Cholesky, stochastic gradients by
//! Hutchinson probes with conjugate-gradient solves, and stochastic values by
//! Lanczos quadrature.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::icnn::{Icnn, JetOutput, JetSpec, LossGraph, LossNode};
use crate::numcore::{cg_solve, cholesky_inverse, cholesky_logdet, rademacher, sym_eigen, RngStream};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogdetMode {
    Exact,
    Stochastic,
}

/// How SLQ probe vectors are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeDesign {
    /// Independent Rademacher vectors.
    Rademacher,
    /// Columns of a sign-randomized Hadamard matrix: marginally Rademacher,
    /// mutually orthogonal within each block of `2^⌈log₂ d⌉` probes.
    Orthogonal,
}

/// Dimension at and below which `mode = None` resolves to exact.
pub const EXACT_MAX_DIM: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LogdetConfig {
    /// `None` picks exact for `d ≤ 8` and stochastic above.
    pub mode: Option<LogdetMode>,
    /// Hutchinson probes per particle and inner iteration.
    pub probes: usize,
    pub cg_tol: f64,
    /// `None` caps CG at `min(d, 50)` iterations.
    pub cg_max_iter: Option<usize>,
    pub slq_probes: usize,
    pub lanczos_steps: usize,
    pub slq_design: ProbeDesign,
}

impl Default for LogdetConfig {
    fn default() -> Self {
        Self {
            mode: None,
            probes: 1,
            cg_tol: 1e-10,
            cg_max_iter: None,
            slq_probes: 32,
            lanczos_steps: 20,
            slq_design: ProbeDesign::Orthogonal,
        }
    }
}

impl LogdetConfig {
    pub fn exact() -> Self {
        Self { mode: Some(LogdetMode::Exact), ..Self::default() }
    }

    pub fn stochastic(probes: usize) -> Self {
        Self { mode: Some(LogdetMode::Stochastic), probes, ..Self::default() }
    }

    pub fn resolved_mode(&self, d: usize) -> LogdetMode {
        self.mode.unwrap_or(if d <= EXACT_MAX_DIM { LogdetMode::Exact } else { LogdetMode::Stochastic })
    }

    pub fn cg_iters(&self, d: usize) -> usize {
        self.cg_max_iter.unwrap_or(d.min(50))
    }

    pub fn validate(&self) -> Result<()> {
        if self.probes == 0 || self.slq_probes == 0 {
            return Err(Error::ConfigInvalid("logdet probes must be >= 1".into()));
        }
        if !(self.cg_tol > 0.0) {
            return Err(Error::ConfigInvalid("logdet.cg_tol must be > 0".into()));
        }
        if self.lanczos_steps == 0 {
            return Err(Error::ConfigInvalid("logdet.lanczos_steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// `log|H|` by Cholesky.
pub fn logdet_exact(h: ArrayView2<f64>) -> Result<f64> {
    cholesky_logdet(h).map(|(ld, _)| ld)
}

/// Exact `log|Hᵢ|` and `Hᵢ⁻¹` from a Hessian jet batch.
pub fn exact_from_jets(spec: &JetSpec, out: &JetOutput) -> Result<(Vec<f64>, Vec<Array2<f64>>)> {
    let parts = par::map_indices(out.batch(), |i| {
        let h = spec.hessian_of(out, i);
        cholesky_logdet(h.view()).map(|(ld, l)| (ld, cholesky_inverse(l.view())))
    });
    let mut lds = Vec::with_capacity(parts.len());
    let mut invs = Vec::with_capacity(parts.len());
    for p in parts {
        let (ld, inv) = p?;
        lds.push(ld);
        invs.push(inv);
    }
    Ok((lds, invs))
}

/// `Hᵢ vᵢ` at every row of `points`, matrix-free through the network.
pub fn hvp_batch(net: &Icnn, points: ArrayView2<f64>, vs: ArrayView2<f64>) -> Result<Array2<f64>> {
    let d = net.dim();
    let b = points.nrows();
    if vs.dim() != points.dim() {
        return Err(Error::ShapeMismatch(format!("directions {:?} vs points {:?}", vs.dim(), points.dim())));
    }
    let spec = JetSpec { unit_dirs: d, extra: 1, pairs: (0..d).map(|j| (j, d)).collect() };
    let extra = vs.to_owned().into_shape_with_order((b, 1, d)).expect("contiguous");
    let (out, _) = net.jets(points, &spec, Some(extra.view()), false)?;
    Ok(out.second)
}

/// Hessian-vector product closure at a single point.
pub fn hessian_matvec<'a>(net: &'a Icnn, x: ArrayView1<'a, f64>) -> impl Fn(ArrayView1<f64>) -> Array1<f64> + 'a {
    let pt = x.to_owned().insert_axis(ndarray::Axis(0));
    move |v: ArrayView1<f64>| {
        let vs = v.to_owned().insert_axis(ndarray::Axis(0));
        hvp_batch(net, pt.view(), vs.view()).expect("shapes validated by caller").row(0).to_owned()
    }
}

/// Probe directions `[z₀, v₀, z₁, v₁, ...]` per point with `Hzₛ = vₛ` solved by
/// CG. Probes are keyed by `(particle, probe)` within `stream`.
pub fn solve_probes(
    net: &Icnn,
    points: ArrayView2<f64>,
    probes: usize,
    config: &LogdetConfig,
    stream: RngStream,
) -> Result<(Array3<f64>, CgStats)> {
    let d = net.dim();
    if points.ncols() != d {
        return Err(Error::DimMismatch { expected: d, got: points.ncols() });
    }
    let iters = config.cg_iters(d);
    let per_point = par::map_indices(points.nrows(), |i| -> Result<(Vec<f64>, CgStats)> {
        let mv = hessian_matvec(net, points.row(i));
        let mut dirs = Vec::with_capacity(2 * probes * d);
        let mut stats = CgStats::default();
        for s in 0..probes {
            let v = rademacher(d, stream.substream(&[i as u64, s as u64]));
            let res = cg_solve(&mv, v.view(), config.cg_tol, iters)?;
            stats.record(res.iterations, res.converged, res.residual / (d as f64).sqrt());
            dirs.extend(res.x.iter());
            dirs.extend(v.iter());
        }
        Ok((dirs, stats))
    });
    let mut flat = Vec::with_capacity(points.nrows() * 2 * probes * d);
    let mut stats = CgStats::default();
    for p in per_point {
        let (dirs, st) = p?;
        flat.extend(dirs);
        stats.merge(&st);
    }
    let dirs = Array3::from_shape_vec((points.nrows(), 2 * probes, d), flat).expect("sizes agree");
    Ok((dirs, stats))
}

/// Summary of the CG solves behind a stochastic gradient.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct CgStats {
    pub solves: usize,
    pub unconverged: usize,
    pub max_iterations: usize,
    pub max_rel_residual: f64,
}

impl CgStats {
    fn record(&mut self, iterations: usize, converged: bool, rel_residual: f64) {
        self.solves += 1;
        self.unconverged += usize::from(!converged);
        self.max_iterations = self.max_iterations.max(iterations);
        self.max_rel_residual = self.max_rel_residual.max(rel_residual);
    }

    fn merge(&mut self, o: &CgStats) {
        self.solves += o.solves;
        self.unconverged += o.unconverged;
        self.max_iterations = self.max_iterations.max(o.max_iterations);
        self.max_rel_residual = self.max_rel_residual.max(o.max_rel_residual);
    }
}

/// Loss node `(1/P) Σₛ zₛᵀ H vₛ` with `zₛ = H⁻¹vₛ` held fixed, at a single point.
///
/// Its value is an estimate of `d`; its parameter gradient is the Hutchinson
/// estimate of `∂θ log|H_u(x)|`.
pub fn logdet_grad_stochastic(
    net: &Icnn,
    x: ArrayView1<f64>,
    config: &LogdetConfig,
    stream: RngStream,
) -> Result<LossNode> {
    let d = net.dim();
    if x.len() != d {
        return Err(Error::DimMismatch { expected: d, got: x.len() });
    }
    let p = config.probes;
    let points = x.to_owned().insert_axis(ndarray::Axis(0));
    let (dirs, _) = solve_probes(net, points.view(), p, config, stream)?;
    let spec = JetSpec::probes(d, p);
    let (out, _) = net.jets(points.view(), &spec, Some(dirs.view()), false)?;
    let mut adjoint = JetOutput::zeros(1, &spec);
    adjoint.second.fill(1.0 / p as f64);
    let value = out.second.row(0).sum() / p as f64;
    Ok(LossNode { value, graph: LossGraph { points, spec, extra_dirs: Some(dirs), adjoint } })
}

fn probe_vector(d: usize, design: ProbeDesign, stream: RngStream, probe: usize) -> Array1<f64> {
    match design {
        ProbeDesign::Rademacher => rademacher(d, stream.substream(&[probe as u64])),
        ProbeDesign::Orthogonal => {
            let n = d.next_power_of_two();
            let block = probe / n;
            // per-block coordinate signs and column permutation
            let signs = rademacher(d, stream.substream(&[u64::MAX, block as u64]));
            let mut cols: Vec<usize> = (0..n).collect();
            let mut rng = stream.substream(&[u64::MAX - 1, block as u64]).rng();
            rand::seq::SliceRandom::shuffle(cols.as_mut_slice(), &mut rng);
            let c = cols[probe % n];
            Array1::from_iter((0..d).map(|i| {
                let h = if (c & i).count_ones() % 2 == 0 { 1.0 } else { -1.0 };
                h * signs[i]
            }))
        }
    }
}

/// Lanczos with full reorthogonalization from `v`; returns the tridiagonal
/// coefficients `(α, β)`.
fn lanczos<F>(matvec: &F, v: &Array1<f64>, steps: usize) -> Result<(Vec<f64>, Vec<f64>)>
where
    F: Fn(ArrayView1<f64>) -> Array1<f64>,
{
    let norm = v.dot(v).sqrt();
    let mut basis: Vec<Array1<f64>> = vec![v / norm];
    let mut alpha = Vec::<f64>::with_capacity(steps);
    let mut beta = Vec::<f64>::with_capacity(steps);
    for j in 0..steps {
        let q = &basis[j];
        let mut w = matvec(q.view());
        let a = q.dot(&w);
        if !a.is_finite() {
            return Err(Error::LanczosBreakdown(format!("non-finite Rayleigh quotient at step {j}")));
        }
        alpha.push(a);
        w.scaled_add(-a, q);
        if j > 0 {
            w.scaled_add(-beta[j - 1], &basis[j - 1]);
        }
        for _ in 0..2 {
            for b in &basis {
                let c = b.dot(&w);
                w.scaled_add(-c, b);
            }
        }
        let bnorm = w.dot(&w).sqrt();
        let scale = alpha.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if j + 1 == steps || bnorm <= 1e-12 * scale || basis.len() == v.len() {
            break;
        }
        beta.push(bnorm);
        basis.push(w / bnorm);
    }
    Ok((alpha, beta))
}

/// `vᵀ log(H) v` by Gauss quadrature on the Lanczos tridiagonal.
fn quadrature<F>(matvec: &F, v: &Array1<f64>, steps: usize) -> Result<f64>
where
    F: Fn(ArrayView1<f64>) -> Array1<f64>,
{
    let (alpha, beta) = lanczos(matvec, v, steps)?;
    let m = alpha.len();
    let mut t = Array2::<f64>::zeros((m, m));
    for i in 0..m {
        t[[i, i]] = alpha[i];
        if i + 1 < m {
            t[[i, i + 1]] = beta[i];
            t[[i + 1, i]] = beta[i];
        }
    }
    let (theta, vecs) = sym_eigen(t.view())?;
    if theta.iter().any(|&x| !(x > 0.0)) {
        return Err(Error::LanczosBreakdown(format!("non-positive Ritz value {}", theta[0])));
    }
    let vv = v.dot(v);
    Ok(vv * theta.iter().zip(vecs.row(0)).map(|(l, tau)| tau * tau * l.ln()).sum::<f64>())
}

/// Stochastic Lanczos quadrature estimate of `log|H|` for the SPD operator
/// `matvec` in dimension `d`. A probe that breaks down is replaced by a fresh
/// one, up to three times.
pub fn logdet_value_slq<F>(matvec: F, d: usize, config: &LogdetConfig, stream: RngStream) -> Result<f64>
where
    F: Fn(ArrayView1<f64>) -> Array1<f64>,
{
    let p = config.slq_probes;
    let mut total = Vec::with_capacity(p);
    for s in 0..p {
        let mut attempt = 0;
        loop {
            let v = probe_vector(d, config.slq_design, stream.substream(&[attempt as u64]), s);
            match quadrature(&matvec, &v, config.lanczos_steps) {
                Ok(val) => {
                    total.push(val);
                    break;
                }
                Err(e @ Error::LanczosBreakdown(_)) if attempt >= 3 => return Err(e),
                Err(Error::LanczosBreakdown(_)) => attempt += 1,
                Err(e) => return Err(e),
            }
        }
    }
    Ok(par::pairwise_sum(&total) / p as f64)
}

/// SLQ log-determinant of the network Hessian at every row of `points`.
pub fn slq_batch(net: &Icnn, points: ArrayView2<f64>, config: &LogdetConfig, stream: RngStream) -> Result<Vec<f64>> {
    par::map_indices(points.nrows(), |i| {
        let mv = hessian_matvec(net, points.row(i));
        logdet_value_slq(mv, net.dim(), config, stream.substream(&[i as u64]))
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::icnn::{init_random, IcnnArch};
    use ndarray::array;
    use rand::Rng;

    fn spd_with_spectrum(d: usize, cond: f64, seed: u64) -> Array2<f64> {
        let mut rng = RngStream::new(seed).rng();
        let a = Array2::from_shape_fn((d, d), |_| rng.random::<f64>() - 0.5);
        let (_, q) = sym_eigen((&a + &a.t()).view()).unwrap();
        let lam = Array1::from_iter((0..d).map(|i| cond.powf(i as f64 / (d - 1) as f64)));
        let h = q.dot(&Array2::from_diag(&lam)).dot(&q.t());
        (&h + &h.t()) * 0.5
    }

    #[test]
    fn exact_examples() {
        assert_eq!(logdet_exact(Array2::<f64>::eye(2).view()).unwrap(), 0.0);
        let e = std::f64::consts::E;
        let h = array![[e, 0.0], [0.0, e * e]];
        assert!((logdet_exact(h.view()).unwrap() - 3.0).abs() < 1e-14);
    }

    #[test]
    fn slq_scaled_identity_is_exact() {
        let c = 3.7;
        let cfg =
            LogdetConfig { lanczos_steps: 1, slq_probes: 4, slq_design: ProbeDesign::Rademacher, ..Default::default() };
        let est = logdet_value_slq(|v| &v * c, 5, &cfg, RngStream::new(1)).unwrap();
        assert!((est - 5.0 * c.ln()).abs() < 1e-12);
    }

    #[test]
    fn slq_random_spd_within_one_percent() {
        for seed in 0..5 {
            let h = spd_with_spectrum(32, 1e3, seed);
            let exact = logdet_exact(h.view()).unwrap();
            let cfg = LogdetConfig { slq_probes: 32, lanczos_steps: 20, ..Default::default() };
            let est = logdet_value_slq(|v| h.dot(&v), 32, &cfg, RngStream::new(seed + 100)).unwrap();
            assert!(((est - exact) / exact).abs() < 1e-2, "seed {seed}: {est} vs {exact}");
        }
    }

    #[test]
    fn slq_is_deterministic() {
        let h = spd_with_spectrum(16, 50.0, 3);
        let cfg = LogdetConfig::default();
        let a = logdet_value_slq(|v| h.dot(&v), 16, &cfg, RngStream::new(9)).unwrap();
        let b = logdet_value_slq(|v| h.dot(&v), 16, &cfg, RngStream::new(9)).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn orthogonal_probes_are_orthogonal_and_signed() {
        let d = 6;
        let vs: Vec<_> = (0..8).map(|p| probe_vector(d, ProbeDesign::Orthogonal, RngStream::new(2), p)).collect();
        let mut gram = Array2::<f64>::zeros((d, d));
        for v in &vs {
            assert!(v.iter().all(|x| x.abs() == 1.0));
            for i in 0..d {
                for j in 0..d {
                    gram[[i, j]] += v[i] * v[j];
                }
            }
        }
        assert_eq!(gram, Array2::<f64>::eye(d) * 8.0);
    }

    #[test]
    fn hvp_matches_dense_hessian() {
        let net = init_random(&IcnnArch::new(3, &[6, 4]), RngStream::new(4));
        let x = array![0.2, -0.4, 0.9];
        let v = array![1.0, 0.5, -2.0];
        let h = net.hessian_x(x.view()).unwrap();
        let hv = hessian_matvec(&net, x.view())(v.view());
        let want = h.dot(&v);
        assert!((&hv - &want).iter().all(|e| e.abs() < 1e-12));
    }

    #[test]
    fn stochastic_node_value_estimates_dimension() {
        let net = init_random(&IcnnArch::new(2, &[6, 4]), RngStream::new(5));
        let node =
            logdet_grad_stochastic(&net, array![0.1, 0.3].view(), &LogdetConfig::stochastic(8), RngStream::new(6))
                .unwrap();
        assert!((node.value - 2.0).abs() < 1e-8);
    }

    #[test]
    fn identity_hessian_has_zero_gradient_contribution() {
        // u = ½‖x‖², S = 0 and λ = ½: H = I and no parameter moves H
        let arch = IcnnArch::new(2, &[3]);
        let mut p = crate::icnn::IcnnParams::zeros(&arch);
        p.lambda = 0.5;
        let net = Icnn::new(arch, p).unwrap();
        let node =
            logdet_grad_stochastic(&net, array![0.3, 0.2].view(), &LogdetConfig::stochastic(4), RngStream::new(1))
                .unwrap();
        let g = node.param_grad(&net).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-14));
    }
}
