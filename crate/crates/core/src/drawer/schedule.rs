//! Noise schedule and the step-index convention.
//!
//! Reverse denoising visits `t = T−1, …, 0`. `ᾱ_0 = 1`, so the `t = 0` forward
//! sample is the clean latent itself, and `ᾱ_t = Π_{s=1..t} (1 − β_s)` after that.

use serde::{Deserialize, Serialize};

use super::DrawError;

pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampler {
    DdimLike,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    pub sampler: Sampler,
}

impl DiffusionSchedule {
    /// Evenly spaced betas from [`BETA_START`] to [`BETA_END`].
    pub fn linear(steps: usize) -> Result<Self, DrawError> {
        if steps < 2 {
            return Err(DrawError::SchemaViolation(format!("at least 2 steps are needed, got {steps}")));
        }
        let betas = (0..steps)
            .map(|i| BETA_START + (BETA_END - BETA_START) * i as f64 / (steps - 1) as f64)
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self, DrawError> {
        if betas.len() < 2 {
            return Err(DrawError::SchemaViolation("a schedule needs at least 2 steps".into()));
        }
        if betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) || betas.windows(2).any(|w| w[1] < w[0]) {
            return Err(DrawError::SchemaViolation("betas must lie in (0, 1) and be nondecreasing".into()));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        alpha_bars.push(acc);
        for b in &betas[1..] {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars, sampler: Sampler::DdimLike })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// Whether guidance is injected at reverse step `t`: `t ≥ r·T`.
    pub fn injects(&self, t: usize, r: f64) -> bool {
        t as f64 >= r * self.steps() as f64
    }

    /// Number of steps a subject draw runs: `⌈T/10⌉`.
    pub fn subject_steps(&self) -> usize {
        self.steps().div_ceil(10)
    }
}
