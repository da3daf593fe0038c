//! Overlapping-patch noise aggregation and implicit sampling, plus the
//! FWM-guided sampler used by stage-2 training.

use alloc::vec;
use alloc::vec::Vec;

use crate::diffusion::{ddim_step, ddim_step_clipped, q_sample, NoiseSchedule, TimestepGrid};
use crate::error::{bail, Error, Result};
use crate::image::{ImageBuffer, PatchRect};
use crate::nn::DenoiserParams;
use crate::rng::SeededRng;
use crate::spectral::{apply_perturbation, fwm_fuse, FreqMask, PerturbationMode, PerturbationSchedule};

/// Anything that predicts `ε̂ = ε_θ(noisy, cond, t)`.
pub trait NoiseEstimator {
    fn estimate(&self, noisy: &ImageBuffer, cond: &ImageBuffer, t: usize) -> Result<ImageBuffer>;
}

impl NoiseEstimator for DenoiserParams {
    fn estimate(&self, noisy: &ImageBuffer, cond: &ImageBuffer, t: usize) -> Result<ImageBuffer> {
        self.predict(noisy, cond, t)
    }
}

impl<F> NoiseEstimator for F
where
    F: Fn(&ImageBuffer, &ImageBuffer, usize) -> Result<ImageBuffer>,
{
    fn estimate(&self, noisy: &ImageBuffer, cond: &ImageBuffer, t: usize) -> Result<ImageBuffer> {
        self(noisy, cond, t)
    }
}

/// Returns the exact noise that separates `noisy` from the forward diffusion
/// of `target` at `t`. Sampling with it lands on `target`.
#[derive(Debug, Clone)]
pub struct OracleEstimator<'a> {
    pub target: &'a ImageBuffer,
    pub sched: &'a NoiseSchedule,
}

impl NoiseEstimator for OracleEstimator<'_> {
    fn estimate(&self, noisy: &ImageBuffer, _cond: &ImageBuffer, t: usize) -> Result<ImageBuffer> {
        let ab = self.sched.alpha_bar(t);
        noisy.lincomb(
            1.0 / libm::sqrt(1.0 - ab),
            self.target,
            -libm::sqrt(ab) / libm::sqrt(1.0 - ab),
        )
    }
}

/// Deterministic covering of a frame by square patches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchGrid {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub stride: usize,
    pub rects: Vec<PatchRect>,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.rects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rects.is_empty()
    }

    /// How many rects cover each pixel, row-major.
    pub fn coverage(&self) -> Vec<u32> {
        let mut k = vec![0u32; self.height * self.width];
        for r in &self.rects {
            for y in r.top..r.top + r.size {
                k[y * self.width + r.left..y * self.width + r.left + r.size]
                    .iter_mut()
                    .for_each(|c| *c += 1);
            }
        }
        k
    }
}

/// `0, r, 2r, …` while the patch fits, plus a final `len − p` if needed.
fn positions(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..=len - patch).step_by(stride).collect();
    if out.last() != Some(&(len - patch)) {
        out.push(len - patch);
    }
    out
}

pub fn build_grid(height: usize, width: usize, patch: usize, stride: usize) -> Result<PatchGrid> {
    if patch == 0 || patch > height.min(width) {
        return Err(Error::OutOfBounds {
            top: 0,
            left: 0,
            size: patch,
            height,
            width,
        });
    }
    if stride == 0 || stride > patch {
        bail!(InvalidArgument, "stride {stride} not in 1..={patch}");
    }
    let rows = positions(height, patch, stride);
    let cols = positions(width, patch, stride);
    let rects = rows
        .iter()
        .flat_map(|&top| cols.iter().map(move |&left| PatchRect::new(top, left, patch)))
        .collect();
    Ok(PatchGrid {
        height,
        width,
        patch,
        stride,
        rects,
    })
}

/// Patch-wise `ε̂` averaged over overlaps: `Σ_d M_d·ε_θ(crop_d) ⊘ K`.
pub fn aggregate_noise<E: NoiseEstimator + ?Sized>(
    noisy: &ImageBuffer,
    cond: &ImageBuffer,
    grid: &PatchGrid,
    t: usize,
    denoiser: &E,
) -> Result<ImageBuffer> {
    noisy.ensure_same_shape(cond)?;
    let (h, w, c) = noisy.shape();
    if (grid.height, grid.width) != (h, w) {
        bail!(Shape, "grid {}x{} vs image {h}x{w}", grid.height, grid.width);
    }
    let mut sum = ImageBuffer::zeros(h, w, c);
    let mut coverage = vec![0u32; h * w];
    for &r in &grid.rects {
        let eps = denoiser.estimate(&noisy.crop(r)?, &cond.crop(r)?, t)?;
        if eps.shape() != (r.size, r.size, c) {
            bail!(Shape, "estimator returned {:?} for a {}-pixel patch", eps.shape(), r.size);
        }
        for ch in 0..c {
            let dst = sum.plane_mut(ch);
            let src = eps.plane(ch);
            for y in 0..r.size {
                let row = (r.top + y) * w + r.left;
                dst[row..row + r.size]
                    .iter_mut()
                    .zip(&src[y * r.size..(y + 1) * r.size])
                    .for_each(|(d, s)| *d += s);
            }
        }
        for y in r.top..r.top + r.size {
            coverage[y * w + r.left..y * w + r.left + r.size]
                .iter_mut()
                .for_each(|k| *k += 1);
        }
    }
    if let Some(i) = coverage.iter().position(|&k| k == 0) {
        bail!(InvalidArgument, "pixel ({}, {}) not covered by the grid", i / w, i % w);
    }
    for ch in 0..c {
        sum.plane_mut(ch)
            .iter_mut()
            .zip(&coverage)
            .for_each(|(v, &k)| *v /= k as f64);
    }
    Ok(sum)
}

/// Inference-time options.
#[derive(Debug, Clone)]
pub struct SampleOptions {
    /// When set, each intermediate state is fused with a fresh forward
    /// diffusion of the conditioning image using this mask. The final
    /// transition is never fused, since its guidance branch would be the
    /// conditioning image itself.
    pub fwm_inference: Option<FreqMask>,
    /// Clamp every clean-image estimate to `[0,1]` (see
    /// [`ddim_step_clipped`]). On by default.
    pub clip_x0: bool,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            fwm_inference: None,
            clip_x0: true,
        }
    }
}

fn run_sampler(
    cond: &ImageBuffer,
    sched: &NoiseSchedule,
    ts: &TimestepGrid,
    opts: &SampleOptions,
    rng: &mut SeededRng,
    mut estimate: impl FnMut(&ImageBuffer, usize) -> Result<ImageBuffer>,
) -> Result<ImageBuffer> {
    let (h, w, c) = cond.shape();
    let step = if opts.clip_x0 { ddim_step_clipped } else { ddim_step };
    let mut x = ImageBuffer::gaussian(h, w, c, rng);
    for (t, t_next) in ts.transitions() {
        let eps = estimate(&x, t)?;
        x = step(&x, &eps, t, t_next, sched)?;
        if let (Some(mask), true) = (&opts.fwm_inference, t_next > 0) {
            let noise = ImageBuffer::gaussian(h, w, c, rng);
            let guide = q_sample(cond, t_next, &noise, sched)?;
            x = fwm_fuse(&guide, &x, mask)?;
        }
    }
    Ok(x)
}

/// Implicit sampling from Gaussian noise, one aggregated noise estimate per
/// transition. Output is left unclamped.
pub fn sample<E: NoiseEstimator + ?Sized>(
    cond: &ImageBuffer,
    denoiser: &E,
    sched: &NoiseSchedule,
    grid: &PatchGrid,
    ts: &TimestepGrid,
    opts: &SampleOptions,
    rng: &mut SeededRng,
) -> Result<ImageBuffer> {
    run_sampler(cond, sched, ts, opts, rng, |x, t| aggregate_noise(x, cond, grid, t, denoiser))
}

/// The same loop as [`sample`] but evaluating the estimator on the whole
/// frame, without cropping.
pub fn sample_whole<E: NoiseEstimator + ?Sized>(
    cond: &ImageBuffer,
    denoiser: &E,
    sched: &NoiseSchedule,
    ts: &TimestepGrid,
    opts: &SampleOptions,
    rng: &mut SeededRng,
) -> Result<ImageBuffer> {
    run_sampler(cond, sched, ts, opts, rng, |x, t| denoiser.estimate(x, cond, t))
}

/// FWM guidance shared by [`guided_sample`] and the stage-2 unroll.
#[derive(Debug, Clone)]
pub struct Guidance {
    pub mask: FreqMask,
    pub perturbation: PerturbationSchedule,
    pub mode: PerturbationMode,
    /// Clamp clean-image estimates as in [`ddim_step_clipped`].
    pub clip_x0: bool,
}

/// Single-patch sampler guided by the clean image: after every implicit
/// step, the state is fused with a fresh forward diffusion of `original`
/// (amplitude inside the mask from the sample, phase from the forward branch)
/// and then perturbed with amplitude `L(t)`.
pub fn guided_sample<E: NoiseEstimator + ?Sized>(
    original: &ImageBuffer,
    cond: &ImageBuffer,
    denoiser: &E,
    sched: &NoiseSchedule,
    ts: &TimestepGrid,
    guidance: &Guidance,
    rng: &mut SeededRng,
) -> Result<ImageBuffer> {
    original.ensure_same_shape(cond)?;
    let (h, w, c) = original.shape();
    let mut x = ImageBuffer::gaussian(h, w, c, rng);
    for (t, t_next) in ts.transitions() {
        let eps = denoiser.estimate(&x, cond, t)?;
        let reverse = if guidance.clip_x0 {
            ddim_step_clipped(&x, &eps, t, t_next, sched)?
        } else {
            ddim_step(&x, &eps, t, t_next, sched)?
        };
        let forward = forward_branch(original, t_next, sched, rng)?;
        let fused = fwm_fuse(&forward, &reverse, &guidance.mask)?;
        let amp = guidance.perturbation.amplitude(t)?;
        x = apply_perturbation(&fused, amp, guidance.mode, rng)?;
    }
    Ok(x)
}

/// `q_sample(original, t_next, fresh ε)`; the noise draw happens even at
/// `t_next = 0` so the RNG stream does not depend on the grid's end.
pub(crate) fn forward_branch(
    original: &ImageBuffer,
    t_next: usize,
    sched: &NoiseSchedule,
    rng: &mut SeededRng,
) -> Result<ImageBuffer> {
    let (h, w, c) = original.shape();
    let noise = ImageBuffer::gaussian(h, w, c, rng);
    q_sample(original, t_next, &noise, sched)
}
