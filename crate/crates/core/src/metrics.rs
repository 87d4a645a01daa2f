//! KDE, density errors, and exact 1-D Wasserstein distances.

use ndarray::{Array1, ArrayView1};

use crate::cloud::ParticleCloud;
use crate::error::{Error, Result};
use crate::par;

/// Number of grid points in [`default_grid`].
pub const GRID_POINTS: usize = 512;

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn column_1d(cloud: &ParticleCloud) -> Result<Vec<f64>> {
    if cloud.dim() != 1 {
        return Err(Error::DimMismatch { expected: 1, got: cloud.dim() });
    }
    Ok(cloud.points.column(0).to_vec())
}

/// Silverman's rule `0.9 · min(σ̂, IQR/1.34) · n^{−1/5}` for a 1-D cloud.
pub fn silverman_bandwidth(cloud: &ParticleCloud) -> Result<f64> {
    let mut xs = column_1d(cloud)?;
    let n = xs.len() as f64;
    let sd = cloud.variance()[0].sqrt();
    xs.sort_by(f64::total_cmp);
    let iqr = quantile_sorted(&xs, 0.75) - quantile_sorted(&xs, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let h = 0.9 * spread * n.powf(-0.2);
    Ok(if h > 0.0 { h } else { 1.0 })
}

/// [`GRID_POINTS`] points spanning the data range padded by three bandwidths.
pub fn default_grid(cloud: &ParticleCloud, bandwidth: f64) -> Result<Array1<f64>> {
    let xs = column_1d(cloud)?;
    let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min) - 3.0 * bandwidth;
    let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 3.0 * bandwidth;
    Ok(Array1::linspace(lo, hi, GRID_POINTS))
}

/// Weighted Gaussian KDE of a 1-D cloud on `grid`; `None` uses Silverman.
pub fn kde(cloud: &ParticleCloud, bandwidth: Option<f64>, grid: ArrayView1<f64>) -> Result<Array1<f64>> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let xs = column_1d(cloud)?;
    let h = match bandwidth {
        Some(h) if h > 0.0 && h.is_finite() => h,
        Some(h) => return Err(Error::ConfigInvalid(format!("bandwidth must be positive, got {h}"))),
        None => silverman_bandwidth(cloud)?,
    };
    let norm = 1.0 / (h * (2.0 * std::f64::consts::PI).sqrt());
    let w = cloud.weights.view();
    let vals = par::map_indices(grid.len(), |g| {
        let x = grid[g];
        let terms: Vec<f64> = xs.iter().zip(w).map(|(xi, wi)| wi * (-0.5 * ((x - xi) / h).powi(2)).exp()).collect();
        norm * par::pairwise_sum(&terms)
    });
    Ok(Array1::from(vals))
}

/// Trapezoid rule for samples `y` on the (possibly nonuniform) grid `x`.
pub fn trapezoid(x: ArrayView1<f64>, y: ArrayView1<f64>) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::GridMismatch(format!("{} grid points vs {} values", x.len(), y.len())));
    }
    let parts: Vec<f64> = (1..x.len()).map(|i| 0.5 * (x[i] - x[i - 1]) * (y[i] + y[i - 1])).collect();
    Ok(par::pairwise_sum(&parts))
}

/// `∫ |est − reference|` on a shared grid.
pub fn l1_error(grid: ArrayView1<f64>, est: ArrayView1<f64>, reference: ArrayView1<f64>) -> Result<f64> {
    if est.len() != reference.len() || est.len() != grid.len() {
        return Err(Error::GridMismatch(format!(
            "grid {}, estimate {}, reference {}",
            grid.len(),
            est.len(),
            reference.len()
        )));
    }
    let diff = (&est - &reference).mapv(f64::abs);
    trapezoid(grid, diff.view())
}

/// Exact squared W₂ between equal-size, equal-weight 1-D samples: the mean
/// squared difference of the sorted values.
pub fn w2_1d(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::SizeMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    let terms: Vec<f64> = sa.iter().zip(&sb).map(|(x, y)| (x - y) * (x - y)).collect();
    Ok(par::pairwise_sum(&terms) / a.len() as f64)
}

/// Sum over coordinates of [`w2_1d`] between the marginals of two clouds.
pub fn w2_marginals(a: &ParticleCloud, b: &ParticleCloud) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimMismatch { expected: a.dim(), got: b.dim() });
    }
    (0..a.dim()).map(|j| w2_1d(a.points.column(j), b.points.column(j))).sum()
}
