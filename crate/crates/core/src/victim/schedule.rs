//! Linear-beta diffusion noise schedule and the forward noising step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameters a schedule is rebuilt from (stored in checkpoints).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

/// Noise rates `beta_t`, `alpha_t = 1 - beta_t` and their running product, for `t` in `1..=T`.
///
/// Index `t - 1` of each vector holds step `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    config: ScheduleConfig,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn new(config: ScheduleConfig) -> Result<Self> {
        let ScheduleConfig {
            steps,
            beta_start,
            beta_end,
        } = config;
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "beta range must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let beta: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut running = 1.0;
        for a in &alpha {
            running *= a;
            alpha_bar.push(running);
        }
        Ok(Self {
            config,
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn config(&self) -> ScheduleConfig {
        self.config
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Step { t, max: self.steps() });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `alpha_bar_t`; `t = 0` returns 1 (clean data).
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Coefficients `(sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t))` of the forward noising step.
    pub fn noising_coefficients(&self, t: usize) -> Result<(f64, f64)> {
        self.check_step(t)?;
        let ab = self.alpha_bar(t);
        Ok((ab.sqrt(), (1.0 - ab).sqrt()))
    }
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self::new(ScheduleConfig::default()).expect("default schedule is valid")
    }
}

/// `sqrt(alpha_bar) * z0 + sqrt(1 - alpha_bar) * eps`, elementwise.
pub fn noise_with_alpha_bar(z0: &[f64], eps: &[f64], alpha_bar: f64) -> Vec<f64> {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    z0.iter().zip(eps).map(|(z, e)| a * z + b * e).collect()
}
