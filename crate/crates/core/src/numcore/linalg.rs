use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// Relative asymmetry tolerated by the factorizations.
pub const SYMMETRY_TOL: f64 = 1e-10;

fn check_square(h: &ArrayView2<f64>) -> Result<usize> {
    let (r, c) = h.dim();
    if r != c {
        return Err(Error::DimMismatch { expected: r, got: c });
    }
    Ok(r)
}

fn check_symmetric(h: &ArrayView2<f64>) -> Result<()> {
    let n = h.nrows();
    let scale = h.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..i {
            worst = worst.max((h[[i, j]] - h[[j, i]]).abs());
        }
    }
    if worst > SYMMETRY_TOL * scale {
        return Err(Error::NotSymmetric(worst / scale));
    }
    Ok(())
}

/// Lower-triangular Cholesky factor `L` with `L Lᵀ = H`.
///
/// Fails with [`Error::NotSpd`] on the first non-positive pivot.
pub fn cholesky(h: ArrayView2<f64>) -> Result<Array2<f64>> {
    let n = check_square(&h)?;
    check_symmetric(&h)?;
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut diag = h[[j, j]];
        for k in 0..j {
            diag -= l[[j, k]] * l[[j, k]];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return Err(Error::NotSpd { pivot: j, value: diag });
        }
        let ljj = diag.sqrt();
        l[[j, j]] = ljj;
        for i in (j + 1)..n {
            let mut s = h[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / ljj;
        }
    }
    Ok(l)
}

/// `log|H|` and the Cholesky factor of an SPD matrix.
pub fn cholesky_logdet(h: ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
    let l = cholesky(h)?;
    let logdet = 2.0 * l.diag().iter().map(|d| d.ln()).sum::<f64>();
    Ok((logdet, l))
}

/// Solve `L Lᵀ x = b` given the Cholesky factor.
pub fn cholesky_solve(l: ArrayView2<f64>, b: ArrayView1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut y = Array1::<f64>::zeros(n);
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[[i, k]] * y[k];
        }
        y[i] = s / l[[i, i]];
    }
    let mut x = Array1::<f64>::zeros(n);
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l[[k, i]] * x[k];
        }
        x[i] = s / l[[i, i]];
    }
    x
}

/// Inverse of an SPD matrix from its Cholesky factor.
pub fn cholesky_inverse(l: ArrayView2<f64>) -> Array2<f64> {
    let n = l.nrows();
    let mut inv = Array2::<f64>::zeros((n, n));
    let mut e = Array1::<f64>::zeros(n);
    for j in 0..n {
        e.fill(0.0);
        e[j] = 1.0;
        let col = cholesky_solve(l, e.view());
        inv.column_mut(j).assign(&col);
    }
    // exact symmetry for downstream adjoints
    for i in 0..n {
        for j in 0..i {
            let s = 0.5 * (inv[[i, j]] + inv[[j, i]]);
            inv[[i, j]] = s;
            inv[[j, i]] = s;
        }
    }
    inv
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in ascending order and the matching eigenvectors as
/// columns. Independent of the Cholesky path, which makes it the oracle for
/// log-determinant checks.
pub fn sym_eigen(a: ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let n = check_square(&a)?;
    check_symmetric(&a)?;
    let mut m = a.to_owned();
    let mut v = Array2::<f64>::eye(n);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in 0..i {
                off += m[[i, j]] * m[[i, j]];
            }
        }
        let scale: f64 = m.iter().map(|x| x * x).sum();
        if off <= 1e-30 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[[i, i]].total_cmp(&m[[j, j]]));
    let vals = Array1::from_iter(order.iter().map(|&i| m[[i, i]]));
    let mut vecs = Array2::<f64>::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        vecs.column_mut(dst).assign(&v.column(src));
    }
    Ok((vals, vecs))
}
