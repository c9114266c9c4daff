//! Noise schedules and the phasic gate/weight pair.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Offset `s` of the cosine schedule.
const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

/// Reverse-step noise scale choice.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    /// Posterior standard deviation; `sigma_1 = 0`.
    #[default]
    Posterior,
    /// `sigma_t = sqrt(beta_t)`.
    Large,
}

/// Per-step variances and derived coefficients for `t = 1..=T`.
///
/// Index `t` is the diffusion step. `alpha_bar(0) == 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    fn from_betas(beta: Vec<f64>, sigma_mode: SigmaMode) -> Self {
        let steps = beta.len();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        let mut prod = 1.0;
        for a in &alpha {
            prod *= a;
            alpha_bar.push(prod);
        }
        let sigma = (1..=steps)
            .map(|t| match sigma_mode {
                SigmaMode::Large => beta[t - 1].sqrt(),
                SigmaMode::Posterior => {
                    let var = beta[t - 1] * (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t]);
                    var.max(0.0).sqrt()
                }
            })
            .collect();
        Self {
            steps,
            beta,
            alpha,
            alpha_bar,
            sigma,
        }
    }

    /// Betas interpolated linearly from `beta_start` to `beta_end`, both inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64, sigma_mode: SigmaMode) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidConfig("schedule steps must be >= 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "beta range must satisfy 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
            )));
        }
        let beta = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Ok(Self::from_betas(beta, sigma_mode))
    }

    /// Squared-cosine cumulative schedule with betas clipped at 0.999.
    pub fn cosine(steps: usize, sigma_mode: SigmaMode) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidConfig("schedule steps must be >= 1".into()));
        }
        let f = |t: usize| {
            let x = (t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
            (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
        };
        let f0 = f(0);
        let beta = (1..=steps)
            .map(|t| (1.0 - (f(t) / f0) / (f(t - 1) / f0)).min(MAX_BETA))
            .collect();
        Ok(Self::from_betas(beta, sigma_mode))
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }

    /// Variance of `q(x_{t-1} | x_t, x_0)`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))
    }

    /// Coefficients `(c_x0, c_xt)` of the posterior mean `c_x0 * x_0 + c_xt * x_t`.
    pub fn posterior_mean_coefs(&self, t: usize) -> (f64, f64) {
        let denom = 1.0 - self.alpha_bar(t);
        (
            self.alpha_bar(t - 1).sqrt() * self.beta(t) / denom,
            self.alpha(t).sqrt() * (1.0 - self.alpha_bar(t - 1)) / denom,
        )
    }
}

/// Shift and exponent of the two phasic functions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhasicConfig {
    /// Shift of the sigmoid gate, in steps.
    pub t_s: f64,
    /// Exponent of the weighting function.
    pub alpha_w: f64,
    pub total_steps: usize,
}

impl Default for PhasicConfig {
    fn default() -> Self {
        Self {
            t_s: 300.0,
            alpha_w: 3.0,
            total_steps: 1000,
        }
    }
}

impl PhasicConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_s >= 0.0 && self.t_s <= self.total_steps as f64) {
            return Err(Error::InvalidConfig(format!(
                "t_s must lie in [0, T], got {} with T = {}",
                self.t_s, self.total_steps
            )));
        }
        if self.alpha_w.is_nan() || self.alpha_w <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "alpha_w must be > 0, got {}",
                self.alpha_w
            )));
        }
        Ok(())
    }

    /// Shifted sigmoid `m(t)`; weights content at large `t`.
    pub fn gate(&self, t: usize) -> f64 {
        1.0 / (1.0 + (-(t as f64 - self.t_s)).exp())
    }

    /// `w(t) = 1 - (t / T)^alpha`; weights target-domain detail at small `t`.
    pub fn weight(&self, t: usize) -> f64 {
        1.0 - (t as f64 / self.total_steps as f64).powf(self.alpha_w)
    }

    /// Weight of the consistency/style branch, `m(t) (1 - w(t))`.
    pub fn branch_weight(&self, t: usize) -> f64 {
        self.gate(t) * (1.0 - self.weight(t))
    }
}
