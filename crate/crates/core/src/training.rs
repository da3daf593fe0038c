//! Two-stage training of the noise estimator.
//!
//! Stage 1 minimizes the noise-estimation MSE on random patches. Stage 2
//! runs the FWM-guided sampler on each patch and minimizes `L1 + MS-SSIM`
//! between its output and the clean patch, back-propagating through the
//! last `W` sampler steps. Inside those steps FWM is differentiated exactly
//! (in its reverse-branch input); earlier steps are replayed without a tape
//! and enter as constants.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::diffusion::{ddim_step, ddim_step_clipped, q_sample, GridRule, NoiseSchedule, TimestepGrid};
use crate::error::{bail, Result};
use crate::image::{random_patch_rects, ImageBuffer};
use crate::losses;
use crate::metrics::SsimConfig;
use crate::nn::{optim, AdamState, Checkpoint, DenoiserParams, EmaState, NodeId, Tape, Tensor};
use crate::rng::SeededRng;
use crate::sampler::{forward_branch, Guidance, NoiseEstimator};
use crate::spectral::{apply_perturbation, fwm_fuse, make_freq_mask, PerturbationMode, PerturbationSchedule};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Last stage-1 iteration (`K`); iterations are counted from 1.
    pub transition_iter: usize,
    pub total_iters: usize,
    /// Image pairs drawn per iteration.
    pub batch: usize,
    pub patches_per_image: usize,
    pub patch_size: usize,
    /// Sampler steps inside stage 2.
    pub s_train: usize,
    pub mask_beta: f64,
    pub l_min: f64,
    pub l_max: f64,
    pub perturbation: PerturbationMode,
    pub lr: f64,
    pub ema_decay: f64,
    pub seed: u64,
    /// Sampler steps differentiated in stage 2 (`W`).
    pub truncation: usize,
    /// Differentiate every stage-2 step, overriding `truncation`.
    pub full_unroll: bool,
    pub grid: GridRule,
    /// MS-SSIM scales; `None` picks the most that fit the patch (at most 5).
    pub ssim_scales: Option<usize>,
    /// Emit a checkpoint every this many iterations (0 disables).
    pub checkpoint_every: usize,
    /// Clamp clean-image estimates inside the stage-2 sampler.
    pub clip_x0: bool,
    /// Learning rate of stage 2; `None` keeps `lr`.
    pub refine_lr: Option<f64>,
    /// Stage-1 rate reached at the transition by cosine annealing; `None` holds `lr`.
    pub lr_final: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            transition_iter: 20_000,
            total_iters: 22_000,
            batch: 2,
            patches_per_image: 16,
            patch_size: 64,
            s_train: 4,
            mask_beta: 0.6,
            l_min: 0.0,
            l_max: 0.05,
            perturbation: PerturbationMode::Gaussian,
            lr: 2e-5,
            ema_decay: 0.999,
            seed: 0,
            truncation: 1,
            full_unroll: false,
            grid: GridRule::Sampling,
            ssim_scales: None,
            checkpoint_every: 0,
            clip_x0: true,
            refine_lr: None,
            lr_final: None,
        }
    }
}

impl TrainConfig {
    /// Iteration counts of the full-scale run.
    pub fn full_scale() -> Self {
        Self {
            transition_iter: 1_000_000,
            total_iters: 1_300_000,
            s_train: 10,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.transition_iter > self.total_iters {
            bail!(InvalidArgument, "transition {} beyond total {}", self.transition_iter, self.total_iters);
        }
        if self.patch_size < 8 {
            bail!(InvalidArgument, "patch size {} < 8", self.patch_size);
        }
        if self.s_train < 2 {
            bail!(InvalidArgument, "s_train {} < 2", self.s_train);
        }
        if self.batch == 0 || self.patches_per_image == 0 {
            bail!(InvalidArgument, "batch and patches_per_image must be >= 1");
        }
        if self.truncation == 0 {
            bail!(InvalidArgument, "truncation window must be >= 1");
        }
        let bad = |r: Option<f64>| r.is_some_and(|r| !(r > 0.0));
        if !(self.lr > 0.0) || bad(self.refine_lr) || bad(self.lr_final) {
            bail!(InvalidArgument, "learning rates must be positive");
        }
        if !(self.mask_beta > 0.0 && self.mask_beta <= 1.0) {
            bail!(InvalidArgument, "mask beta {} not in (0,1]", self.mask_beta);
        }
        PerturbationSchedule::new(self.l_min, self.l_max, 1)?;
        self.ssim_config().check(self.patch_size, self.patch_size)
    }

    /// Learning rate used at 1-based iteration `iter`.
    pub fn lr_at(&self, iter: usize) -> f64 {
        match self.stage_for(iter) {
            Stage::Refine => self.refine_lr.unwrap_or(self.lr),
            Stage::Noise => match self.lr_final {
                None => self.lr,
                Some(end) => {
                    let k = self.transition_iter.max(2);
                    let frac = (iter.saturating_sub(1)) as f64 / (k - 1) as f64;
                    end + 0.5 * (self.lr - end) * (1.0 + libm::cos(core::f64::consts::PI * frac.min(1.0)))
                }
            },
        }
    }

    pub fn ssim_config(&self) -> SsimConfig {
        let base = SsimConfig::default();
        SsimConfig {
            scales: self
                .ssim_scales
                .unwrap_or_else(|| SsimConfig::scales_for(self.patch_size, base.window, base.scales)),
            ..base
        }
    }

    /// Stage run at 1-based iteration `iter`.
    pub fn stage_for(&self, iter: usize) -> Stage {
        if iter <= self.transition_iter {
            Stage::Noise
        } else {
            Stage::Refine
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Noise,
    Refine,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::Noise => 1,
            Stage::Refine => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub iter: usize,
    pub stage: Stage,
    pub loss: f64,
    /// Stage-2 components.
    pub l1: Option<f64>,
    pub ms_ssim: Option<f64>,
}

impl LossReport {
    pub const HEADER: &'static str = "iter,stage,loss,l1,msssim";
}

/// One `iter,stage,loss,l1,msssim` line; stage-1 lines leave the last two
/// fields empty.
impl fmt::Display for LossReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{:.9e},", self.iter, self.stage.number(), self.loss)?;
        if let Some(v) = self.l1 {
            write!(f, "{v:.9e}")?;
        }
        f.write_str(",")?;
        if let Some(v) = self.ms_ssim {
            write!(f, "{v:.9e}")?;
        }
        Ok(())
    }
}

/// Clean patch and its watermarked counterpart.
pub type PatchPair = (ImageBuffer, ImageBuffer);

/// Mutable training state.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: DenoiserParams,
    pub adam: AdamState,
    pub ema: EmaState,
}

impl TrainState {
    pub fn new(params: DenoiserParams, lr: f64, ema_decay: f64) -> Result<Self> {
        let adam = AdamState::new(&params.tensors, lr);
        let ema = EmaState::new(&params.tensors, ema_decay)?;
        Ok(Self { params, adam, ema })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Self {
        Self {
            params: ck.params,
            adam: ck.adam,
            ema: ck.ema,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            ema: self.ema.clone(),
            adam: self.adam.clone(),
        }
    }

    /// Parameters the EMA has been tracking.
    pub fn ema_params(&self) -> DenoiserParams {
        DenoiserParams {
            arch: self.params.arch,
            names: self.params.names.clone(),
            tensors: self.ema.shadow.clone(),
        }
    }

    fn apply(&mut self, grads: &[Tensor]) -> Result<()> {
        self.adam.step(&mut self.params.tensors, grads)?;
        self.ema.update(&self.params.tensors)
    }
}

/// Draws `t` then `ε` for one patch, in that order.
fn draw_noise(shape: (usize, usize, usize), t_max: usize, rng: &mut SeededRng) -> (usize, ImageBuffer) {
    let t = rng.range_inclusive(1, t_max);
    let (h, w, c) = shape;
    (t, ImageBuffer::gaussian(h, w, c, rng))
}

/// Noise-estimation loss of an arbitrary estimator, averaged over the pairs.
/// Consumes the RNG exactly like [`stage1_grads`].
pub fn noise_loss<E: NoiseEstimator + ?Sized>(
    pairs: &[PatchPair],
    denoiser: &E,
    sched: &NoiseSchedule,
    rng: &mut SeededRng,
) -> Result<f64> {
    let mut total = 0.0;
    for (clean, marked) in pairs {
        clean.ensure_same_shape(marked)?;
        let (t, eps) = draw_noise(clean.shape(), sched.t_max(), rng);
        let noisy = q_sample(clean, t, &eps, sched)?;
        total += losses::mse_loss(&denoiser.estimate(&noisy, marked, t)?, &eps)?;
    }
    Ok(total / pairs.len() as f64)
}

/// Stage-1 loss and its parameter gradient, averaged over the pairs.
pub fn stage1_grads(
    pairs: &[PatchPair],
    params: &DenoiserParams,
    sched: &NoiseSchedule,
    rng: &mut SeededRng,
) -> Result<(f64, Vec<Tensor>)> {
    if pairs.is_empty() {
        bail!(InvalidArgument, "empty batch");
    }
    let mut grads: Vec<Tensor> = params.tensors.iter().map(Tensor::zeros_like).collect();
    let mut total = 0.0;
    for (clean, marked) in pairs {
        clean.ensure_same_shape(marked)?;
        let (t, eps) = draw_noise(clean.shape(), sched.t_max(), rng);
        let noisy = q_sample(clean, t, &eps, sched)?;
        let mut tape = Tape::new(&params.tensors);
        let x = tape.constant(Tensor::from(&noisy));
        let c = tape.constant(Tensor::from(marked));
        let target = tape.constant(Tensor::from(&eps));
        let out = params.forward(&mut tape, x, c, t)?;
        let loss = losses::mse_node(&mut tape, out, target)?;
        total += tape.value(loss).item();
        optim::accumulate(&mut grads, &tape.backward(loss, &Tensor::scalar(1.0))?.params(&tape))?;
    }
    let n = pairs.len() as f64;
    optim::scale_grads(&mut grads, 1.0 / n);
    Ok((total / n, grads))
}

pub fn stage1_step(
    pairs: &[PatchPair],
    state: &mut TrainState,
    sched: &NoiseSchedule,
    rng: &mut SeededRng,
    iter: usize,
) -> Result<LossReport> {
    let (loss, grads) = stage1_grads(pairs, &state.params, sched, rng)?;
    state.apply(&grads)?;
    Ok(LossReport {
        iter,
        stage: Stage::Noise,
        loss,
        l1: None,
        ms_ssim: None,
    })
}

/// Stage-2 settings derived once from a [`TrainConfig`].
#[derive(Debug, Clone)]
pub struct RefineSetup {
    pub grid: TimestepGrid,
    pub guidance: Guidance,
    pub ssim: SsimConfig,
    /// Steps recorded on the tape, counted from the end.
    pub window: usize,
}

impl RefineSetup {
    pub fn new(cfg: &TrainConfig, sched: &NoiseSchedule) -> Result<Self> {
        let grid = TimestepGrid::new(cfg.s_train, sched.t_max(), cfg.grid)?;
        let steps = grid.transitions().len();
        Ok(Self {
            window: if cfg.full_unroll { steps } else { cfg.truncation.min(steps) },
            grid,
            guidance: Guidance {
                mask: make_freq_mask(cfg.patch_size, cfg.patch_size, cfg.mask_beta)?,
                perturbation: PerturbationSchedule::new(cfg.l_min, cfg.l_max, sched.t_max())?,
                mode: cfg.perturbation,
                clip_x0: cfg.clip_x0,
            },
            ssim: cfg.ssim_config(),
        })
    }
}

/// Output of one stage-2 unroll.
#[derive(Debug, Clone)]
pub struct Unroll {
    pub attacked: ImageBuffer,
    pub loss: f64,
    pub l1: f64,
    pub ms_ssim: f64,
    /// Gradient with respect to the parameters used in the taped steps.
    pub grads: Vec<Tensor>,
}

/// Runs the guided sampler on one pair. Untaped steps evaluate `early`, taped
/// steps evaluate `late`; training passes the same parameters for both.
/// Draws from `rng` in the same order as
/// [`guided_sample`](crate::sampler::guided_sample).
pub fn stage2_unroll(
    pair: &PatchPair,
    early: &DenoiserParams,
    late: &DenoiserParams,
    sched: &NoiseSchedule,
    setup: &RefineSetup,
    rng: &mut SeededRng,
) -> Result<Unroll> {
    let (clean, marked) = pair;
    clean.ensure_same_shape(marked)?;
    let (h, w, c) = clean.shape();
    let steps = setup.grid.transitions();
    let first_taped = steps.len() - setup.window;
    let g = &setup.guidance;

    let mut x = ImageBuffer::gaussian(h, w, c, rng);
    for &(t, t_next) in &steps[..first_taped] {
        let eps = early.predict(&x, marked, t)?;
        let reverse = if g.clip_x0 {
            ddim_step_clipped(&x, &eps, t, t_next, sched)?
        } else {
            ddim_step(&x, &eps, t, t_next, sched)?
        };
        let forward = forward_branch(clean, t_next, sched, rng)?;
        let fused = fwm_fuse(&forward, &reverse, &g.mask)?;
        x = apply_perturbation(&fused, g.perturbation.amplitude(t)?, g.mode, rng)?;
    }

    let mut tape = Tape::new(&late.tensors);
    let cond = tape.constant(Tensor::from(marked));
    let mut xn = tape.constant(Tensor::from(&x));
    for &(t, t_next) in &steps[first_taped..] {
        let eps = late.forward(&mut tape, xn, cond, t)?;
        let reverse = ddim_node(&mut tape, xn, eps, t, t_next, sched, g.clip_x0)?;
        let forward = forward_branch(clean, t_next, sched, rng)?;
        let fused = tape.fwm(reverse, forward, g.mask.clone())?;
        xn = perturb_node(&mut tape, fused, g.perturbation.amplitude(t)?, g.mode, rng)?;
    }
    let target = tape.constant(Tensor::from(clean));
    let (loss, l1, ms) = losses::refinement_node(&mut tape, xn, target, &setup.ssim)?;
    let grads = tape.backward(loss, &Tensor::scalar(1.0))?.params(&tape);
    Ok(Unroll {
        attacked: tape.value(xn).to_image()?,
        loss: tape.value(loss).item(),
        l1: tape.value(l1).item(),
        ms_ssim: tape.value(ms).item(),
        grads,
    })
}

/// Taped mirror of [`ddim_step`] (or [`ddim_step_clipped`]) with identical
/// coefficients.
fn ddim_node(
    tape: &mut Tape<'_>,
    x: NodeId,
    eps: NodeId,
    t: usize,
    t_next: usize,
    sched: &NoiseSchedule,
    clip: bool,
) -> Result<NodeId> {
    let ab = sched.alpha_bar(t);
    let inv = 1.0 / libm::sqrt(ab);
    let mut x0 = tape.axpby(x, inv, eps, -libm::sqrt(1.0 - ab) * inv)?;
    if clip {
        x0 = tape.clamp(x0, 0.0, 1.0)?;
    }
    if t_next == 0 {
        return Ok(x0);
    }
    let abn = sched.alpha_bar(t_next);
    tape.axpby(x0, libm::sqrt(abn), eps, libm::sqrt(1.0 - abn))
}

/// Taped mirror of [`apply_perturbation`], drawing the same noise.
fn perturb_node(
    tape: &mut Tape<'_>,
    x: NodeId,
    amplitude: f64,
    mode: PerturbationMode,
    rng: &mut SeededRng,
) -> Result<NodeId> {
    if amplitude == 0.0 {
        return Ok(x);
    }
    match mode {
        PerturbationMode::Constant => tape.offset(x, amplitude),
        PerturbationMode::Gaussian => {
            let dims = tape.value(x).dims.clone();
            let n = tape.value(x).len();
            let z = Tensor::new(dims, (0..n).map(|_| amplitude * rng.normal()).collect());
            let z = tape.constant(z);
            tape.add(x, z)
        }
    }
}

pub fn stage2_step(
    pairs: &[PatchPair],
    state: &mut TrainState,
    sched: &NoiseSchedule,
    setup: &RefineSetup,
    rng: &mut SeededRng,
    iter: usize,
) -> Result<LossReport> {
    if pairs.is_empty() {
        bail!(InvalidArgument, "empty batch");
    }
    let mut grads: Vec<Tensor> = state.params.tensors.iter().map(Tensor::zeros_like).collect();
    let (mut loss, mut l1, mut ms) = (0.0, 0.0, 0.0);
    for pair in pairs {
        let u = stage2_unroll(pair, &state.params, &state.params, sched, setup, rng)?;
        optim::accumulate(&mut grads, &u.grads)?;
        loss += u.loss;
        l1 += u.l1;
        ms += u.ms_ssim;
    }
    let n = pairs.len() as f64;
    optim::scale_grads(&mut grads, 1.0 / n);
    state.apply(&grads)?;
    Ok(LossReport {
        iter,
        stage: Stage::Refine,
        loss: loss / n,
        l1: Some(l1 / n),
        ms_ssim: Some(ms / n),
    })
}

/// Crops `patches_per_image` random patch pairs from each of `batch` random
/// corpus entries.
pub fn draw_batch(corpus: &[PatchPair], cfg: &TrainConfig, rng: &mut SeededRng) -> Result<Vec<PatchPair>> {
    if corpus.is_empty() {
        bail!(InvalidArgument, "empty corpus");
    }
    let mut out = Vec::with_capacity(cfg.batch * cfg.patches_per_image);
    for _ in 0..cfg.batch {
        let (clean, marked) = &corpus[rng.below(corpus.len())];
        clean.ensure_same_shape(marked)?;
        let rects = random_patch_rects(rng, cfg.patches_per_image, cfg.patch_size, clean.height(), clean.width())?;
        for r in rects {
            out.push((clean.crop(r)?, marked.crop(r)?));
        }
    }
    Ok(out)
}

/// Drives iterations `start+1..=total_iters`.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub sched: NoiseSchedule,
    pub state: TrainState,
    pub iter: usize,
    refine: RefineSetup,
    rng: SeededRng,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, sched: NoiseSchedule, params: DenoiserParams) -> Result<Self> {
        let state = TrainState::new(params, cfg.lr, cfg.ema_decay)?;
        Self::resume(cfg, sched, state, 0)
    }

    /// Continues from `state` as if `iter` iterations had run. The data
    /// stream is keyed by (seed, iteration), so resuming replays exactly.
    pub fn resume(cfg: TrainConfig, sched: NoiseSchedule, state: TrainState, iter: usize) -> Result<Self> {
        cfg.validate()?;
        state.params.validate()?;
        let refine = RefineSetup::new(&cfg, &sched)?;
        let rng = SeededRng::new(cfg.seed);
        Ok(Self {
            cfg,
            sched,
            state,
            iter,
            refine,
            rng,
        })
    }

    pub fn finished(&self) -> bool {
        self.iter >= self.cfg.total_iters
    }

    pub fn step(&mut self, corpus: &[PatchPair]) -> Result<LossReport> {
        if self.finished() {
            bail!(InvalidArgument, "training already finished at iteration {}", self.iter);
        }
        let iter = self.iter + 1;
        let mut rng = self.rng.fork(iter as u64);
        let batch = draw_batch(corpus, &self.cfg, &mut rng)?;
        let stage = self.cfg.stage_for(iter);
        self.state.adam.lr = self.cfg.lr_at(iter);
        let report = match stage {
            Stage::Noise => stage1_step(&batch, &mut self.state, &self.sched, &mut rng, iter)?,
            Stage::Refine => stage2_step(&batch, &mut self.state, &self.sched, &self.refine, &mut rng, iter)?,
        };
        if !report.loss.is_finite() {
            bail!(InvalidArgument, "non-finite loss at iteration {iter}");
        }
        self.iter = iter;
        Ok(report)
    }

    pub fn checkpoint_due(&self) -> bool {
        self.cfg.checkpoint_every > 0 && self.iter % self.cfg.checkpoint_every == 0
    }
}

/// Runs all remaining iterations, handing every report and every periodic
/// checkpoint to the callbacks. Returns the final checkpoint.
pub fn train(
    corpus: &[PatchPair],
    cfg: TrainConfig,
    params: DenoiserParams,
    sched: NoiseSchedule,
    mut on_report: impl FnMut(&LossReport) -> Result<()>,
    mut on_checkpoint: impl FnMut(usize, &Checkpoint) -> Result<()>,
) -> Result<Checkpoint> {
    if corpus.is_empty() {
        bail!(InvalidArgument, "empty corpus");
    }
    let mut trainer = Trainer::new(cfg, sched, params)?;
    while !trainer.finished() {
        let report = trainer.step(corpus)?;
        on_report(&report)?;
        if trainer.checkpoint_due() {
            on_checkpoint(trainer.iter, &trainer.state.checkpoint())?;
        }
    }
    Ok(trainer.state.checkpoint())
}

/// Trailing moving average with window `n`.
pub fn moving_average(values: &[f64], n: usize) -> Vec<f64> {
    let n = n.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (i, v) in values.iter().enumerate() {
        sum += v;
        if i >= n {
            sum -= values[i - n];
        }
        out.push(sum / (i + 1).min(n) as f64);
    }
    out
}

pub fn log_lines(reports: &[LossReport]) -> String {
    let mut s = format!("{}\n", LossReport::HEADER);
    for r in reports {
        s.push_str(&format!("{r}\n"));
    }
    s
}
