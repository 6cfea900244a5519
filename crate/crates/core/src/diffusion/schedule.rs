use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        make_schedule(self.timesteps, self.beta_start, self.beta_end)
    }
}

/// Variance schedule over timesteps `1..=T`; arrays are indexed by `t - 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

/// Linear betas from `beta_start` to `beta_end` inclusive.
pub fn make_schedule(t_max: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if t_max < 2 {
        return Err(Error::BadRange(format!("T = {t_max} < 2")));
    }
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::BadRange(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let beta = (0..t_max)
        .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64)
        .collect();
    DiffusionSchedule::from_betas(beta)
}

impl DiffusionSchedule {
    /// Any betas in `[0, 1)`.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() || beta.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(Error::BadRange("betas must lie in [0, 1)".into()));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut acc = 1.0;
        let alpha_bar = alpha
            .iter()
            .map(|a| {
                acc *= a;
                acc
            })
            .collect();
        Ok(DiffusionSchedule { beta, alpha, alpha_bar })
    }

    pub fn t_max(&self) -> usize {
        self.beta.len()
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_max() {
            return Err(Error::BadTimestep { t, max: self.t_max() });
        }
        Ok(())
    }

    /// `alpha_bar` at `t`, with `alpha_bar(0) = 1`.
    pub fn alpha_bar_at(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }
}

/// Closed-form noising `sqrt(ab_t) z0 + sqrt(1 - ab_t) eps`.
pub fn q_sample(z0: &Tensor, t: usize, eps: &Tensor, schedule: &DiffusionSchedule) -> Result<Tensor> {
    schedule.check_t(t)?;
    let ab = schedule.alpha_bar[t - 1];
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    z0.zip_map(eps, |z, e| a * z + b * e)
}

/// Inverse of [`q_sample`] given the noise.
pub fn reconstruct_z0(z_t: &Tensor, t: usize, eps: &Tensor, schedule: &DiffusionSchedule) -> Result<Tensor> {
    schedule.check_t(t)?;
    let ab = schedule.alpha_bar[t - 1];
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    z_t.zip_map(eps, |z, e| (z - b * e) / a)
}

/// One forward step `sqrt(1 - beta_t) z_{t-1} + sqrt(beta_t) eps`.
pub fn q_step(z_prev: &Tensor, t: usize, eps: &Tensor, schedule: &DiffusionSchedule) -> Result<Tensor> {
    schedule.check_t(t)?;
    let bt = schedule.beta[t - 1];
    let (a, b) = ((1.0 - bt).sqrt(), bt.sqrt());
    z_prev.zip_map(eps, |z, e| a * z + b * e)
}
