//! Attacks as the harness sees them: the classical ones from the core plus
//! the diffusion attack driven by a trained checkpoint.

use std::fmt;
use std::path::Path;

use anyhow::{bail, Result};
use fmdiff_core::attacks::{apply_attack, AttackSpec};
use fmdiff_core::diffusion::{GridRule, NoiseSchedule, TimestepGrid};
use fmdiff_core::nn::DenoiserParams;
use fmdiff_core::sampler::{build_grid, sample, SampleOptions};
use fmdiff_core::spectral::make_freq_mask;
use fmdiff_core::training::TrainState;
use fmdiff_core::{ImageBuffer, SeededRng};

use crate::io;

pub const FMDIFF_TAG: &str = "fmdiff";
pub const T_MAX: usize = 1000;

/// Sampler settings of the diffusion attack.
#[derive(Debug, Clone, PartialEq)]
pub struct FmdiffSettings {
    pub steps: usize,
    pub patch: usize,
    /// `None` uses half the patch.
    pub stride: Option<usize>,
    /// Fuse intermediate states with the forward-diffused input.
    pub fwm_inference: bool,
    pub beta: f64,
    /// Sample with the raw parameters instead of their moving average.
    pub raw_weights: bool,
}

impl Default for FmdiffSettings {
    fn default() -> Self {
        Self {
            steps: 10,
            patch: 64,
            stride: None,
            fwm_inference: false,
            beta: 0.6,
            raw_weights: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FmdiffAttack {
    pub denoiser: DenoiserParams,
    pub sched: NoiseSchedule,
    pub settings: FmdiffSettings,
}

impl FmdiffAttack {
    pub fn new(denoiser: DenoiserParams, settings: FmdiffSettings) -> Result<Self> {
        denoiser.validate()?;
        TimestepGrid::new(settings.steps, T_MAX, GridRule::Sampling)?;
        if settings.patch == 0 || settings.stride == Some(0) {
            bail!("patch and stride must be positive");
        }
        if settings.patch % denoiser.arch.size_multiple() != 0 {
            bail!("patch {} is not a multiple of {}", settings.patch, denoiser.arch.size_multiple());
        }
        Ok(Self {
            denoiser,
            sched: NoiseSchedule::default_linear(T_MAX)?,
            settings,
        })
    }

    pub fn from_checkpoint(path: &Path, settings: FmdiffSettings) -> Result<Self> {
        let state = TrainState::from_checkpoint(io::read_checkpoint(path)?);
        let params = if settings.raw_weights { state.params.clone() } else { state.ema_params() };
        Self::new(params, settings)
    }

    pub fn stride(&self) -> usize {
        self.settings.stride.unwrap_or((self.settings.patch / 2).max(1))
    }

    /// Output clamped to `[0,1]`, not yet quantized.
    pub fn apply(&self, img: &ImageBuffer, rng: &mut SeededRng) -> Result<ImageBuffer> {
        let (h, w, c) = img.shape();
        if c != self.denoiser.arch.image_channels {
            bail!("checkpoint expects {} channels, image has {c}", self.denoiser.arch.image_channels);
        }
        let grid = build_grid(h, w, self.settings.patch, self.stride())?;
        let ts = TimestepGrid::new(self.settings.steps, T_MAX, GridRule::Sampling)?;
        let opts = SampleOptions {
            fwm_inference: if self.settings.fwm_inference {
                Some(make_freq_mask(h, w, self.settings.beta)?)
            } else {
                None
            },
            ..SampleOptions::default()
        };
        Ok(sample(img, &self.denoiser, &self.sched, &grid, &ts, &opts, rng)?.clamped())
    }
}

#[derive(Debug, Clone)]
pub enum Attack {
    Classical(AttackSpec),
    Fmdiff(Box<FmdiffAttack>),
}

impl Attack {
    pub fn tag(&self) -> &'static str {
        match self {
            Attack::Classical(s) => s.method.tag(),
            Attack::Fmdiff(_) => FMDIFF_TAG,
        }
    }

    /// Report parameter; the diffusion attack reports its step count.
    pub fn param(&self) -> f64 {
        match self {
            Attack::Classical(s) => s.param,
            Attack::Fmdiff(f) => f.settings.steps as f64,
        }
    }

    pub fn apply(&self, img: &ImageBuffer, rng: &mut SeededRng) -> Result<ImageBuffer> {
        match self {
            Attack::Classical(s) => Ok(apply_attack(img, s, rng)?),
            Attack::Fmdiff(f) => f.apply(img, rng),
        }
    }
}

impl fmt::Display for Attack {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Attack::Classical(s) => write!(f, "{s}"),
            Attack::Fmdiff(a) => write!(f, "{FMDIFF_TAG}:{}", a.settings.steps),
        }
    }
}

/// Stream for image `index` of a run seeded with `seed`. The attack
/// subcommand and the bench both use it, so their outputs agree.
pub fn image_rng(seed: u64, index: usize) -> SeededRng {
    SeededRng::new(seed).fork(index as u64)
}
