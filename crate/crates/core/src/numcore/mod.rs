//! Dense linear algebra, iterative solvers, keyed random streams and
//! finite-difference oracles shared by the rest of the crate.

pub mod cg;
pub mod linalg;
pub mod rng;

use ndarray::{Array1, Array2};

pub use cg::{cg_solve, cg_solve_observed, CgResult};
pub use linalg::{cholesky, cholesky_inverse, cholesky_logdet, cholesky_solve, sym_eigen};
pub use rng::{rademacher, RngStream};

pub type Vector = Array1<f64>;
pub type Matrix = Array2<f64>;

/// Central-difference gradient `(f(x+h·eᵢ) − f(x−h·eᵢ)) / 2h`.
pub fn finite_diff_grad<F>(f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Relative error `‖a − b‖₂ / max(‖b‖₂, floor)`.
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(floor)
}
