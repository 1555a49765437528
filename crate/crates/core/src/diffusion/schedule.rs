use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Variance used for the reverse-step noise.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    /// `σ_t² = (1 − ᾱ_{t−1}) / (1 − ᾱ_t) · β_t` with `ᾱ_{−1} = 1`; no noise on the last step.
    #[default]
    Posterior,
    /// `σ_t² = β_t`.
    Beta,
}

/// Forward-process variance tables, indexed `t = 0 … T−1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta_start: f64,
    beta_end: f64,
    sigma_mode: SigmaMode,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced `β` from `beta_start` to `beta_end`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64, sigma_mode: SigmaMode) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::invalid(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let beta = (0..steps)
            .map(|t| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * t as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let mut s = Self::from_betas(beta, sigma_mode)?;
        s.beta_start = beta_start;
        s.beta_end = beta_end;
        Ok(s)
    }

    /// Arbitrary `β` table with `0 ≤ β_t < 1`. Zero entries give identity steps.
    pub fn from_betas(beta: Vec<f64>, sigma_mode: SigmaMode) -> Result<Self> {
        if beta.is_empty() || beta.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(Error::invalid("betas must be non-empty and in [0, 1)"));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut acc = 1.0;
        for &a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let sigma = (0..beta.len())
            .map(|t| match sigma_mode {
                SigmaMode::Beta => beta[t].sqrt(),
                SigmaMode::Posterior => {
                    let prev = if t == 0 { 1.0 } else { alpha_bar[t - 1] };
                    let denom = 1.0 - alpha_bar[t];
                    if denom <= 0.0 {
                        0.0
                    } else {
                        ((1.0 - prev) / denom * beta[t]).sqrt()
                    }
                }
            })
            .collect();
        Ok(Self {
            beta_start: beta[0],
            beta_end: *beta.last().unwrap(),
            sigma_mode,
            beta,
            alpha,
            alpha_bar,
            sigma,
        })
    }

    /// Replaces the reverse-step standard deviations.
    pub fn override_sigma(&mut self, sigma: Vec<f64>) -> Result<()> {
        if sigma.len() != self.beta.len() || sigma.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::invalid("sigma must have one non-negative entry per step"));
        }
        self.sigma = sigma;
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta_start(&self) -> f64 {
        self.beta_start
    }

    pub fn beta_end(&self) -> f64 {
        self.beta_end
    }

    pub fn sigma_mode(&self) -> SigmaMode {
        self.sigma_mode
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t < self.steps() {
            Ok(())
        } else {
            Err(Error::OutOfRange {
                what: "timestep",
                index: t,
                limit: self.steps(),
            })
        }
    }
}
