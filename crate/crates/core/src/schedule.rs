//! Diffusion variance schedule and the closed forms built on it: forward
//! noising, the one-step denoised estimate, and the reverse-step mean.
//!
//! Time steps run `1..=T` in the public API; storage is 0-based with the
//! conversion done once at the boundary. `alpha_bar(0)` is defined as 1 so
//! the posterior variance formula is valid at `t = 1`.

use crate::error::{Error, Result};

/// Which fixed variance the reverse transitions use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VarianceKind {
    /// The forward-posterior variance (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t) * beta_t,
    /// with the t = 1 entry pinned to beta_1.
    #[default]
    Posterior,
    /// Plain beta_t.
    Beta,
}

/// Immutable variance schedule plus derived coefficient tables.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_variances: Vec<f64>,
    variance_kind: VarianceKind,
}

/// Linear beta schedule: `beta_t` affine in t from `beta_start` to `beta_end`.
pub fn linear_schedule(num_steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    linear_schedule_with(num_steps, beta_start, beta_end, VarianceKind::Posterior)
}

pub fn linear_schedule_with(
    num_steps: usize,
    beta_start: f64,
    beta_end: f64,
    variance_kind: VarianceKind,
) -> Result<NoiseSchedule> {
    if num_steps == 0 {
        return Err(Error::invalid("num_steps must be >= 1"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::invalid(format!(
            "variance bounds must satisfy 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )));
    }
    let betas: Vec<f64> = if num_steps == 1 {
        vec![beta_start]
    } else {
        (0..num_steps)
            .map(|i| {
                beta_start + (beta_end - beta_start) * i as f64 / (num_steps - 1) as f64
            })
            .collect()
    };
    NoiseSchedule::from_betas(betas, variance_kind)
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>, variance_kind: VarianceKind) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if betas.iter().any(|&b| !(0.0 < b && b < 1.0)) {
            return Err(Error::invalid("all betas must lie strictly inside (0, 1)"));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut prod = 1.0;
        for &a in &alphas {
            prod *= a;
            alpha_bars.push(prod);
        }
        let posterior_variances = (0..betas.len())
            .map(|i| match variance_kind {
                VarianceKind::Beta => betas[i],
                VarianceKind::Posterior => {
                    if i == 0 {
                        betas[0]
                    } else {
                        (1.0 - alpha_bars[i - 1]) / (1.0 - alpha_bars[i]) * betas[i]
                    }
                }
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            posterior_variances,
            variance_kind,
        })
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn variance_kind(&self) -> VarianceKind {
        self.variance_kind
    }

    fn check_step(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.num_steps() {
            return Err(Error::StepOutOfRange {
                t,
                min: 1,
                max: self.num_steps(),
            });
        }
        Ok(t - 1)
    }

    /// `beta_t` for t in 1..=T.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `alpha_t = 1 - beta_t` for t in 1..=T.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Running product of alphas up to t. `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Fixed reverse-step variance sigma_t^2 for t in 1..=T.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.posterior_variances[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Forward noising closed form: `sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
    pub fn q_sample(&self, x0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        let i = self.check_step(t)?;
        if x0.len() != eps.len() {
            return Err(Error::ShapeMismatch {
                expected: x0.len(),
                got: eps.len(),
            });
        }
        let ab = self.alpha_bars[i];
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(x0
            .iter()
            .zip(eps)
            .map(|(x, e)| sa * x + sn * e)
            .collect())
    }

    /// One-step denoised estimate from a noise prediction:
    /// `x_t / sqrt(abar_t) - sqrt(1 - abar_t) eps_hat / sqrt(abar_t)`.
    pub fn predict_x0(&self, x_t: &[f64], t: usize, eps_hat: &[f64]) -> Result<Vec<f64>> {
        let i = self.check_step(t)?;
        if x_t.len() != eps_hat.len() {
            return Err(Error::ShapeMismatch {
                expected: x_t.len(),
                got: eps_hat.len(),
            });
        }
        let ab = self.alpha_bars[i];
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(x_t
            .iter()
            .zip(eps_hat)
            .map(|(x, e)| (x - sn * e) / sa)
            .collect())
    }

    /// Unguided reverse-step mean:
    /// `(x_t - beta_t eps_hat / sqrt(1 - abar_t)) / sqrt(alpha_t)`.
    pub fn reverse_mean(&self, x_t: &[f64], t: usize, eps_hat: &[f64]) -> Result<Vec<f64>> {
        let i = self.check_step(t)?;
        if x_t.len() != eps_hat.len() {
            return Err(Error::ShapeMismatch {
                expected: x_t.len(),
                got: eps_hat.len(),
            });
        }
        let beta = self.betas[i];
        let coeff = beta / (1.0 - self.alpha_bars[i]).sqrt();
        let inv_sqrt_alpha = 1.0 / self.alphas[i].sqrt();
        Ok(x_t
            .iter()
            .zip(eps_hat)
            .map(|(x, e)| (x - coeff * e) * inv_sqrt_alpha)
            .collect())
    }
}
