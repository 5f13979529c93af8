//! Discrete diffusion noise schedules and DDIM timestep spacing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cumulative signal levels `ᾱ_t` for `t = 0..T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    alphas_cumprod: Vec<f64>,
}

impl NoiseSchedule {
    /// The "scaled linear" schedule: `sqrt(β)` linear between the endpoints.
    pub fn scaled_linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 || !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Validation(format!(
                "bad schedule: {steps} steps, betas {beta_start}..{beta_end}"
            )));
        }
        let (a, b) = (beta_start.sqrt(), beta_end.sqrt());
        let mut acc = 1.0;
        let alphas_cumprod = (0..steps)
            .map(|i| {
                let s = a + (b - a) * i as f64 / (steps - 1) as f64;
                acc *= 1.0 - s * s;
                acc
            })
            .collect();
        Ok(Self { alphas_cumprod })
    }

    /// 1000 steps, betas 0.00085 to 0.012: the latent-diffusion default.
    pub fn latent_diffusion() -> Self {
        Self::scaled_linear(1000, 0.000_85, 0.012).expect("constant schedule is valid")
    }

    pub fn len(&self) -> usize {
        self.alphas_cumprod.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas_cumprod.is_empty()
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alphas_cumprod[t]
    }

    /// `ᾱ` at a continuous fraction `u ∈ [0, 1]` of the schedule.
    pub fn alpha_bar_at_fraction(&self, u: f64) -> f64 {
        let t = (u.clamp(0.0, 1.0) * (self.len() - 1) as f64).round() as usize;
        self.alpha_bar(t)
    }

    /// Evenly spaced ("leading") DDIM timesteps in increasing order:
    /// `0, s, 2s, ...` with `s = T / steps`.
    pub fn ddim_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        if steps == 0 || steps > self.len() {
            return Err(Error::Validation(format!("ddim steps {steps} outside 1..={}", self.len())));
        }
        let stride = self.len() / steps;
        Ok((0..steps).map(|k| k * stride).collect())
    }
}
