use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Variance-exploding process with `sigma(t) = t`: zero drift,
/// `g(t)^2 = 2t`, marginals `N(x0, t^2 I)` and prior `N(0, sigma_max^2 I)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Exponent of the power-spaced sampling grid.
    pub rho: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: 7.0,
        }
    }
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_max > self.sigma_min && self.sigma_max.is_finite()) {
            return Err(Error::Config(format!(
                "noise schedule needs 0 < sigma_min < sigma_max < inf, got [{}, {}]",
                self.sigma_min, self.sigma_max
            )));
        }
        if !(self.rho > 0.0) {
            return Err(Error::Config(format!("grid exponent must be positive, got {}", self.rho)));
        }
        Ok(())
    }

    #[inline]
    pub fn sigma(&self, t: f64) -> f64 {
        t
    }

    /// Squared diffusion coefficient `g(t)^2 = d sigma^2 / dt`.
    #[inline]
    pub fn diffusion_sq(&self, t: f64) -> f64 {
        2.0 * t
    }

    pub fn prior_std(&self) -> f64 {
        self.sigma_max
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.sigma_min && t <= self.sigma_max
    }

    pub fn log_span(&self) -> f64 {
        (self.sigma_max / self.sigma_min).ln()
    }

    /// `steps + 1` noise levels descending from `sigma_max` to `sigma_min`,
    /// evenly spaced in `sigma^(1/rho)`.
    pub fn sampling_grid(&self, steps: usize) -> Result<Vec<f64>> {
        if steps == 0 {
            return Err(Error::Config("sampling needs at least one step".into()));
        }
        self.validate()?;
        let inv = 1.0 / self.rho;
        let hi = self.sigma_max.powf(inv);
        let lo = self.sigma_min.powf(inv);
        let mut grid: Vec<f64> = (0..=steps)
            .map(|i| (hi + i as f64 / steps as f64 * (lo - hi)).powf(self.rho))
            .collect();
        grid[0] = self.sigma_max;
        grid[steps] = self.sigma_min;
        Ok(grid)
    }
}

fn check_time(t: f64) -> Result<()> {
    if !(t >= 0.0 && t.is_finite()) {
        return Err(Error::Config(format!("diffusion time must be finite and >= 0, got {t}")));
    }
    Ok(())
}

/// `x_t = x0 + sigma(t) eps`.
pub fn forward_sample(schedule: &NoiseSchedule, x0: &[f64], t: f64, eps: &[f64]) -> Result<Vec<f64>> {
    check_time(t)?;
    if x0.len() != eps.len() {
        return Err(Error::Config(format!(
            "noise has dimension {}, point has {}",
            eps.len(),
            x0.len()
        )));
    }
    let s = schedule.sigma(t);
    Ok(x0.iter().zip(eps).map(|(x, e)| x + s * e).collect())
}

/// `grad log q(x_t | x0) = -(x_t - x0) / sigma(t)^2`.
pub fn conditional_score(schedule: &NoiseSchedule, x_t: &[f64], x0: &[f64], t: f64) -> Result<Vec<f64>> {
    check_time(t)?;
    if t == 0.0 {
        return Err(Error::Config("conditional score is undefined at t = 0".into()));
    }
    if x0.len() != x_t.len() {
        return Err(Error::Config("dimension mismatch in conditional score".into()));
    }
    let s2 = schedule.sigma(t).powi(2);
    Ok(x_t.iter().zip(x0).map(|(xt, x)| -(xt - x) / s2).collect())
}
