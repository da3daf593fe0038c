//! Variance schedules and the closed-form forward/reverse diffusion algebra.

use alloc::vec::Vec;

use crate::error::{bail, Error, Result};
use crate::image::ImageBuffer;

/// Precomputed tables for a `t_max`-step diffusion. All tables are indexed by
/// the timestep directly; index 0 holds the clean-image convention
/// `ᾱ_0 = 1`, `β_0 = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    t_max: usize,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma_sq: Vec<f64>,
}

impl NoiseSchedule {
    /// β linearly interpolated from `beta_start` (t = 1) to `beta_end` (t = t_max).
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_max == 0 {
            bail!(InvalidArgument, "t_max must be >= 1");
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            bail!(
                InvalidArgument,
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            );
        }
        let mut betas = Vec::with_capacity(t_max + 1);
        betas.push(0.0);
        for t in 1..=t_max {
            let frac = if t_max == 1 {
                0.0
            } else {
                (t - 1) as f64 / (t_max - 1) as f64
            };
            betas.push(beta_start + (beta_end - beta_start) * frac);
        }
        Ok(Self::from_betas(betas))
    }

    /// Standard DDPM endpoints, `1e-4 → 0.02`.
    pub fn default_linear(t_max: usize) -> Result<Self> {
        Self::linear(t_max, 1e-4, 0.02)
    }

    fn from_betas(beta: Vec<f64>) -> Self {
        let t_max = beta.len() - 1;
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(t_max + 1);
        alpha_bar.push(1.0);
        for t in 1..=t_max {
            alpha_bar.push(alpha_bar[t - 1] * alpha[t]);
        }
        let mut sigma_sq = Vec::with_capacity(t_max + 1);
        sigma_sq.push(0.0);
        for t in 1..=t_max {
            sigma_sq.push((1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t]) * beta[t]);
        }
        Self {
            t_max,
            beta,
            alpha,
            alpha_bar,
            sigma_sq,
        }
    }

    pub fn t_max(&self) -> usize {
        self.t_max
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
    pub fn sigma_sq(&self, t: usize) -> f64 {
        self.sigma_sq[t]
    }

    pub(crate) fn check_t(&self, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.t_max {
            return Err(Error::Timestep { t, t_max: self.t_max });
        }
        Ok(())
    }
}

pub fn linear_schedule(t_max: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    NoiseSchedule::linear(t_max, beta_start, beta_end)
}

/// `√ᾱ_t·img + √(1−ᾱ_t)·noise`. `t = 0` returns `img`.
pub fn q_sample(img: &ImageBuffer, t: usize, noise: &ImageBuffer, sched: &NoiseSchedule) -> Result<ImageBuffer> {
    sched.check_t(t, 0)?;
    let ab = sched.alpha_bar(t);
    img.lincomb(libm::sqrt(ab), noise, libm::sqrt(1.0 - ab))
}

/// Clean-image estimate `(noisy − √(1−ᾱ_t)·ε̂)/√ᾱ_t`.
pub fn predict_x0(noisy: &ImageBuffer, eps_hat: &ImageBuffer, t: usize, sched: &NoiseSchedule) -> Result<ImageBuffer> {
    sched.check_t(t, 0)?;
    let ab = sched.alpha_bar(t);
    let inv = 1.0 / libm::sqrt(ab);
    noisy.lincomb(inv, eps_hat, -libm::sqrt(1.0 - ab) * inv)
}

/// Deterministic implicit update from `t` to `t_next < t`.
pub fn ddim_step(
    noisy: &ImageBuffer,
    eps_hat: &ImageBuffer,
    t: usize,
    t_next: usize,
    sched: &NoiseSchedule,
) -> Result<ImageBuffer> {
    implicit_step(noisy, eps_hat, t, t_next, sched, false)
}

/// [`ddim_step`] with the clean estimate clamped to `[0,1]` before it is
/// re-noised. At large `t` the estimate divides by `√ᾱ_t ≈ 0.006`, so small
/// noise-estimate errors would otherwise push the trajectory far outside the
/// data range. `ε̂` itself is kept as predicted.
pub fn ddim_step_clipped(
    noisy: &ImageBuffer,
    eps_hat: &ImageBuffer,
    t: usize,
    t_next: usize,
    sched: &NoiseSchedule,
) -> Result<ImageBuffer> {
    implicit_step(noisy, eps_hat, t, t_next, sched, true)
}

fn implicit_step(
    noisy: &ImageBuffer,
    eps_hat: &ImageBuffer,
    t: usize,
    t_next: usize,
    sched: &NoiseSchedule,
    clip: bool,
) -> Result<ImageBuffer> {
    sched.check_t(t, 1)?;
    if t_next >= t {
        bail!(InvalidArgument, "non-descending step {t} -> {t_next}");
    }
    let mut x0 = predict_x0(noisy, eps_hat, t, sched)?;
    if clip {
        x0 = x0.clamped();
    }
    if t_next == 0 {
        return Ok(x0);
    }
    let ab = sched.alpha_bar(t_next);
    x0.lincomb(libm::sqrt(ab), eps_hat, libm::sqrt(1.0 - ab))
}

/// Posterior mean `μ_θ` and variance `σ_t²` of the ancestral reverse step.
pub fn reverse_mean_variance(
    noisy: &ImageBuffer,
    eps_hat: &ImageBuffer,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<(ImageBuffer, f64)> {
    sched.check_t(t, 1)?;
    let a = sched.alpha(t);
    let coef = (1.0 - a) / libm::sqrt(1.0 - sched.alpha_bar(t));
    let inv = 1.0 / libm::sqrt(a);
    let mean = noisy.lincomb(inv, eps_hat, -coef * inv)?;
    Ok((mean, sched.sigma_sq(t)))
}

/// Which spacing rule generates the sampling timesteps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GridRule {
    /// `t_j = round((j−1)·T/(S−1)) + 1`, clamped to `[1, T]`.
    #[default]
    Sampling,
    /// `t_j = (j−1)·T/S + 1` (integer division).
    Training,
}

/// Descending timesteps `t_S > … > t_1`; the final transition targets 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimestepGrid {
    pub s: usize,
    pub timesteps: Vec<usize>,
}

impl TimestepGrid {
    pub fn new(s: usize, t_max: usize, rule: GridRule) -> Result<Self> {
        if s < 2 || s > t_max {
            bail!(InvalidArgument, "sampling steps {s} not in 2..={t_max}");
        }
        let mut timesteps: Vec<usize> = Vec::with_capacity(s);
        for j in (1..=s).rev() {
            let t = match rule {
                GridRule::Sampling => {
                    let num = 2 * (j - 1) * t_max + (s - 1);
                    num / (2 * (s - 1)) + 1
                }
                GridRule::Training => (j - 1) * t_max / s + 1,
            }
            .clamp(1, t_max);
            if timesteps.last() != Some(&t) {
                timesteps.push(t);
            }
        }
        Ok(Self { s, timesteps })
    }

    /// `(t, t_next)` pairs in sampling order, ending with `(t_1, 0)`.
    pub fn transitions(&self) -> Vec<(usize, usize)> {
        let n = self.timesteps.len();
        (0..n)
            .map(|i| {
                let next = if i + 1 < n { self.timesteps[i + 1] } else { 0 };
                (self.timesteps[i], next)
            })
            .collect()
    }
}

pub fn timestep_grid(s: usize, t_max: usize) -> Result<TimestepGrid> {
    TimestepGrid::new(s, t_max, GridRule::Sampling)
}
