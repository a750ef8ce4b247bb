//! DDPM bookkeeping. Timesteps are 1-based: `t = 1` is the least noisy
//! level and `alpha_bar(0)` is defined as 1.

use serde::{Deserialize, Serialize};

use super::PolicyError;
use crate::rng::{self, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas spaced linearly from `beta_start` to `beta_end`.
    pub fn linear(
        steps: usize,
        beta_start: f64,
        beta_end: f64,
    ) -> Result<NoiseSchedule, PolicyError> {
        if steps == 0 {
            return Err(PolicyError::Config(
                "diffusion step count must be positive".into(),
            ));
        }
        let betas: Vec<f64> = if steps == 1 {
            vec![beta_start]
        } else {
            (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
                .collect()
        };
        NoiseSchedule::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<NoiseSchedule, PolicyError> {
        if betas.is_empty() || betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(PolicyError::Config("betas must lie in (0, 1)".into()));
        }
        if betas.windows(2).any(|w| w[1] <= w[0]) {
            return Err(PolicyError::Config(
                "betas must be strictly increasing".into(),
            ));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut acc = 1.0;
        let alpha_bars = alphas
            .iter()
            .map(|a| {
                acc *= a;
                acc
            })
            .collect();
        Ok(NoiseSchedule {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// `β̃_t = (1 − ᾱ_{t−1}) / (1 − ᾱ_t) · β_t`, zero at `t = 1`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t)) * self.beta(t)
    }

    /// `x_t = √ᾱ_t x₀ + √(1 − ᾱ_t) ε`.
    pub fn corrupt(&self, x0: &[f64], eps: &[f64], t: usize) -> Vec<f64> {
        let ab = self.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect()
    }

    /// Mean of `q(x_{t−1} | x_t, x₀)`.
    pub fn posterior_mean(&self, x0: &[f64], xt: &[f64], t: usize) -> Vec<f64> {
        let (ab, ab_prev) = (self.alpha_bar(t), self.alpha_bar(t - 1));
        let c0 = ab_prev.sqrt() * self.beta(t) / (1.0 - ab);
        let ct = self.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        x0.iter()
            .zip(xt)
            .map(|(x0, xt)| c0 * x0 + ct * xt)
            .collect()
    }

    /// Mean of `p(x_{t−1} | x_t)` given a noise prediction:
    /// `(x_t − β_t / √(1 − ᾱ_t) · ε̂) / √α_t`.
    pub fn reverse_mean(&self, xt: &[f64], eps_hat: &[f64], t: usize) -> Vec<f64> {
        let coef = self.beta(t) / (1.0 - self.alpha_bar(t)).sqrt();
        let scale = 1.0 / self.alpha(t).sqrt();
        xt.iter()
            .zip(eps_hat)
            .map(|(x, e)| scale * (x - coef * e))
            .collect()
    }
}

/// A noise predictor `ε̂(x_t, t)`; conditioning is captured by the implementor.
pub trait EpsilonModel {
    fn predict(&self, xt: &[f64], t: usize) -> Result<Vec<f64>, PolicyError>;
}

/// Full ancestral sampling from `x_T ~ N(0, I)` down to `x₀`.
pub fn reverse_diffusion<M: EpsilonModel + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    dim: usize,
    rng: &mut Rng,
) -> Result<Vec<f64>, PolicyError> {
    let x: Vec<f64> = (0..dim).map(|_| rng::gaussian(rng)).collect();
    reverse_from(model, schedule, x, rng)
}

/// Ancestral sampling starting from a given `x_T`.
pub fn reverse_from<M: EpsilonModel + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    mut x: Vec<f64>,
    rng: &mut Rng,
) -> Result<Vec<f64>, PolicyError> {
    for t in (1..=schedule.steps()).rev() {
        let eps_hat = model.predict(&x, t)?;
        if eps_hat.len() != x.len() {
            return Err(PolicyError::Shape(format!(
                "noise prediction has {} values, expected {}",
                eps_hat.len(),
                x.len()
            )));
        }
        x = schedule.reverse_mean(&x, &eps_hat, t);
        if t > 1 {
            let sigma = schedule.posterior_variance(t).sqrt();
            for v in &mut x {
                *v += sigma * rng::gaussian(rng);
            }
        }
    }
    Ok(x)
}
