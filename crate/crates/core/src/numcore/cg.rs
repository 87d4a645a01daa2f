//! Matrix-free conjugate gradient for SPD operators.

use ndarray::{Array1, ArrayView1};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct CgResult {
    pub x: Array1<f64>,
    pub iterations: usize,
    /// Final `‖H x − v‖₂`.
    pub residual: f64,
    pub converged: bool,
}

/// Solve `H z = v` where `matvec` applies `H`.
///
/// Stops when `‖H z − v‖₂ ≤ tol·‖v‖₂` or after `max_iter` iterations (then
/// `converged` is false). Non-positive curvature along a search direction is
/// reported as [`Error::Breakdown`].
pub fn cg_solve<F>(matvec: F, v: ArrayView1<f64>, tol: f64, max_iter: usize) -> Result<CgResult>
where
    F: Fn(ArrayView1<f64>) -> Array1<f64>,
{
    cg_solve_observed(matvec, v, tol, max_iter, |_| {})
}

/// [`cg_solve`] with a callback receiving every iterate.
pub fn cg_solve_observed<F, O>(
    matvec: F,
    v: ArrayView1<f64>,
    tol: f64,
    max_iter: usize,
    mut observe: O,
) -> Result<CgResult>
where
    F: Fn(ArrayView1<f64>) -> Array1<f64>,
    O: FnMut(ArrayView1<f64>),
{
    let n = v.len();
    let mut x = Array1::<f64>::zeros(n);
    let v_norm = v.dot(&v).sqrt();
    if v_norm == 0.0 {
        return Ok(CgResult { x, iterations: 0, residual: 0.0, converged: true });
    }
    let target = tol * v_norm;
    let mut r = v.to_owned();
    let mut p = r.clone();
    let mut rr = r.dot(&r);
    let mut iterations = 0;
    while iterations < max_iter {
        let hp = matvec(p.view());
        let curvature = p.dot(&hp);
        if !(curvature > 0.0) {
            return Err(Error::Breakdown(curvature));
        }
        let alpha = rr / curvature;
        x.scaled_add(alpha, &p);
        r.scaled_add(-alpha, &hp);
        iterations += 1;
        observe(x.view());
        let rr_new = r.dot(&r);
        if rr_new.sqrt() <= target {
            rr = rr_new;
            break;
        }
        let beta = rr_new / rr;
        p = &r + &(beta * &p);
        rr = rr_new;
    }
    // recompute the true residual; the recursive one drifts
    let true_res = &matvec(x.view()) - &v;
    let residual = true_res.dot(&true_res).sqrt();
    let converged = rr.sqrt() <= target;
    Ok(CgResult { x, iterations, residual, converged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::linalg::{cholesky, cholesky_solve};
    use crate::numcore::rng::RngStream;
    use ndarray::{array, Array2};
    use rand::Rng;

    #[test]
    fn identity_takes_one_iteration() {
        let v = array![0.3, -1.0, 2.5];
        let res = cg_solve(|p| p.to_owned(), v.view(), 1e-12, 10).unwrap();
        assert_eq!(res.iterations, 1);
        assert_eq!(res.x, v);
        assert!(res.converged);
    }

    #[test]
    fn diagonal_inverse() {
        let d = array![1.0, 2.0, 4.0];
        let v = array![1.0, 1.0, 1.0];
        let res = cg_solve(|p| &p * &d, v.view(), 1e-14, 10).unwrap();
        for (a, b) in res.x.iter().zip([1.0, 0.5, 0.25]) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    fn random_spd(n: usize, seed: u64) -> Array2<f64> {
        let mut rng = RngStream::new(seed).rng();
        let a = Array2::from_shape_fn((n, n), |_| rng.random::<f64>() - 0.5);
        a.dot(&a.t()) / n as f64 + Array2::<f64>::eye(n) * 0.5
    }

    #[test]
    fn random_spd_matches_direct_solve() {
        let h = random_spd(50, 9);
        let v = Array1::from_iter((0..50).map(|i| (i as f64).cos()));
        let res = cg_solve(|p| h.dot(&p), v.view(), 1e-10, 50).unwrap();
        assert!(res.converged);
        assert!(res.residual <= 1e-10 * v.dot(&v).sqrt() * 10.0);
        let direct = cholesky_solve(cholesky(h.view()).unwrap().view(), v.view());
        let err = (&res.x - &direct).mapv(f64::abs).fold(0.0f64, |m, &e| m.max(e));
        assert!(err < 1e-8, "err {err}");
    }

    #[test]
    fn error_decreases_in_energy_norm() {
        let h = random_spd(30, 4);
        let v = Array1::from_iter((0..30).map(|i| ((i * 7) % 5) as f64 - 2.0));
        let exact = cholesky_solve(cholesky(h.view()).unwrap().view(), v.view());
        let mut errs = Vec::new();
        cg_solve_observed(
            |p| h.dot(&p),
            v.view(),
            1e-13,
            30,
            |x| {
                let e = &x - &exact;
                errs.push(e.dot(&h.dot(&e)).sqrt());
            },
        )
        .unwrap();
        assert!(errs.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9) + 1e-14));
    }

    #[test]
    fn indefinite_operator_breaks_down() {
        let d = array![1.0, -1.0];
        let v = array![0.0, 1.0];
        assert!(matches!(cg_solve(|p| &p * &d, v.view(), 1e-12, 5), Err(Error::Breakdown(_))));
    }

    #[test]
    fn zero_rhs_is_trivial() {
        let v = Array1::<f64>::zeros(3);
        let res = cg_solve(|p| p.to_owned(), v.view(), 1e-12, 5).unwrap();
        assert_eq!(res.iterations, 0);
    }
}
