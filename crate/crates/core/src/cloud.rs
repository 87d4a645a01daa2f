//! Weighted particle clouds with log-Jacobian bookkeeping.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// Empirical measure `Σ wᵢ δ_{xᵢ}` produced by pushing `xᵢ⁰` through a chain of
/// maps, with `cum_logdetᵢ = Σₛ log|H_{uₛ}|` along each particle's path.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleCloud {
    pub points: Array2<f64>,
    pub weights: Array1<f64>,
    pub cum_logdet: Array1<f64>,
    /// `log ρ₀(xᵢ⁰)`, when known.
    pub log_rho0: Option<Array1<f64>>,
    pub origin: Array2<f64>,
}

/// Floor applied to `log ρ₀` so `exp` stays representable.
pub const LOG_RHO0_FLOOR: f64 = -745.0;

impl ParticleCloud {
    /// Uniform weights summing to one.
    pub fn new(points: Array2<f64>) -> Result<Self> {
        let n = points.nrows();
        if n == 0 {
            return Err(Error::EmptyCloud);
        }
        let weights = Array1::from_elem(n, 1.0 / n as f64);
        Self::with_weights(points, weights)
    }

    pub fn with_weights(points: Array2<f64>, weights: Array1<f64>) -> Result<Self> {
        let n = points.nrows();
        if n == 0 {
            return Err(Error::EmptyCloud);
        }
        if weights.len() != n {
            return Err(Error::SizeMismatch(n, weights.len()));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::ConfigInvalid("particle weights must be finite and nonnegative".into()));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::ConfigInvalid("particle positions must be finite".into()));
        }
        Ok(Self { origin: points.clone(), points, weights, cum_logdet: Array1::zeros(n), log_rho0: None })
    }

    /// Scale weights so they sum to `mass`.
    pub fn with_mass(mut self, mass: f64) -> Self {
        let total = self.mass();
        self.weights.mapv_inplace(|w| w * mass / total);
        self
    }

    /// Attach `log ρ₀` at the original points, clamped at [`LOG_RHO0_FLOOR`].
    pub fn with_log_rho0(mut self, values: Array1<f64>) -> Result<Self> {
        if values.len() != self.len() {
            return Err(Error::SizeMismatch(self.len(), values.len()));
        }
        self.log_rho0 = Some(values.mapv(|v| if v.is_nan() { LOG_RHO0_FLOOR } else { v.max(LOG_RHO0_FLOOR) }));
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn mass(&self) -> f64 {
        crate::par::pairwise_sum(self.weights.as_slice().unwrap())
    }

    pub fn log_rho0(&self) -> Result<ArrayView1<'_, f64>> {
        self.log_rho0
            .as_ref()
            .map(|v| v.view())
            .ok_or_else(|| Error::DensityUnavailable("cloud carries no initial log-density".into()))
    }

    /// `log ξᵢ = log ρ₀(xᵢ⁰) − cum_logdetᵢ`, the log-density carried by each particle.
    pub fn log_xi(&self) -> Result<Array1<f64>> {
        Ok(&self.log_rho0()? - &self.cum_logdet)
    }

    /// Move particles to `new_points` and add `logdets` to their running sums.
    pub fn push_forward(&self, new_points: Array2<f64>, logdets: Option<ArrayView1<f64>>) -> Result<Self> {
        if new_points.dim() != self.points.dim() {
            return Err(Error::ShapeMismatch(format!(
                "pushed points {:?} vs cloud {:?}",
                new_points.dim(),
                self.points.dim()
            )));
        }
        let mut next = self.clone();
        next.points = new_points;
        if let Some(ld) = logdets {
            if ld.len() != self.len() {
                return Err(Error::SizeMismatch(self.len(), ld.len()));
            }
            next.cum_logdet += &ld;
        }
        Ok(next)
    }

    /// Weighted mean of each coordinate.
    pub fn mean(&self) -> Array1<f64> {
        self.points.t().dot(&self.weights) / self.mass()
    }

    /// Weighted variance of each coordinate.
    pub fn variance(&self) -> Array1<f64> {
        let mu = self.mean();
        let centered = &self.points - &mu.view().insert_axis(ndarray::Axis(0));
        (centered.mapv(|v| v * v)).t().dot(&self.weights) / self.mass()
    }

    pub fn points_view(&self) -> ArrayView2<'_, f64> {
        self.points.view()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn uniform_weights_and_mass() {
        let c = ParticleCloud::new(array![[0.0], [1.0], [2.0], [3.0]]).unwrap();
        assert!((c.mass() - 1.0).abs() < 1e-15);
        let c2 = c.clone().with_mass(2.0);
        assert!((c2.mass() - 2.0).abs() < 1e-15);
        assert!((c.mean()[0] - 1.5).abs() < 1e-15);
        assert!((c.variance()[0] - 1.25).abs() < 1e-15);
    }

    #[test]
    fn empty_and_bad_inputs() {
        assert!(matches!(ParticleCloud::new(Array2::zeros((0, 2))), Err(Error::EmptyCloud)));
        assert!(ParticleCloud::with_weights(array![[0.0]], array![-1.0]).is_err());
    }

    #[test]
    fn log_rho0_is_clamped_and_required() {
        let c = ParticleCloud::new(array![[0.0], [1.0]]).unwrap();
        assert!(matches!(c.log_xi(), Err(Error::DensityUnavailable(_))));
        let c = c.with_log_rho0(array![f64::NEG_INFINITY, -1.0]).unwrap();
        assert_eq!(c.log_rho0().unwrap()[0], LOG_RHO0_FLOOR);
    }

    #[test]
    fn push_forward_accumulates() {
        let c = ParticleCloud::new(array![[0.0], [1.0]]).unwrap();
        let next = c.push_forward(array![[0.5], [2.0]], Some(array![0.1, 0.2].view())).unwrap();
        let next = next.push_forward(array![[0.6], [2.5]], Some(array![0.1, 0.2].view())).unwrap();
        assert_eq!(next.origin, c.origin);
        assert!((next.cum_logdet[1] - 0.4).abs() < 1e-15);
        assert_eq!(next.weights, c.weights);
    }
}
