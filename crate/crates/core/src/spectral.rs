//! Per-channel Fourier analysis and frequency-domain watermark modulation.
//!
//! Transforms are unitary (`1/√(HW)` on both directions) and spectra are kept
//! in the unshifted layout with DC at `(0, 0)`. Masks are described on the
//! centred layout and stored unshifted so they index spectra directly.

use alloc::vec;
use alloc::vec::Vec;

use num_complex::Complex64;

use crate::error::{bail, Error, Result};
use crate::fft::Fft2d;
use crate::image::ImageBuffer;
use crate::rng::SeededRng;

/// Largest imaginary part tolerated when inverting to a real grid.
pub const IMAG_RESIDUE_TOL: f64 = 1e-9;
/// Bins weaker than this get phase 0.
pub const PHASE_FLOOR: f64 = 1e-12;

/// Spectrum of one channel.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralPlane {
    pub height: usize,
    pub width: usize,
    pub real: Vec<f64>,
    pub imag: Vec<f64>,
}

/// Polar form of a [`SpectralPlane`].
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralDecomp {
    pub height: usize,
    pub width: usize,
    pub amplitude: Vec<f64>,
    pub phase: Vec<f64>,
}

impl SpectralPlane {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            real: vec![0.0; height * width],
            imag: vec![0.0; height * width],
        }
    }

    pub(crate) fn to_complex(&self) -> Vec<Complex64> {
        self.real
            .iter()
            .zip(&self.imag)
            .map(|(&r, &i)| Complex64::new(r, i))
            .collect()
    }

    pub(crate) fn from_complex(height: usize, width: usize, data: &[Complex64]) -> Self {
        Self {
            height,
            width,
            real: data.iter().map(|z| z.re).collect(),
            imag: data.iter().map(|z| z.im).collect(),
        }
    }

    pub fn energy(&self) -> f64 {
        self.real
            .iter()
            .zip(&self.imag)
            .map(|(r, i)| r * r + i * i)
            .sum()
    }
}

/// Unitary 2-D DFT of a real `height × width` grid.
pub fn dft2(channel: &[f64], height: usize, width: usize) -> Result<SpectralPlane> {
    dft2_with(&Fft2d::new(height, width), channel)
}

pub(crate) fn dft2_with(plan: &Fft2d, channel: &[f64]) -> Result<SpectralPlane> {
    let (height, width) = plan.dims();
    if height == 0 || width == 0 || channel.len() != height * width {
        bail!(Shape, "grid of {} values is not {height}x{width}", channel.len());
    }
    let mut buf: Vec<Complex64> = channel.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    plan.process(&mut buf, false);
    let norm = 1.0 / libm::sqrt((height * width) as f64);
    buf.iter_mut().for_each(|z| *z *= norm);
    Ok(SpectralPlane::from_complex(height, width, &buf))
}

/// Real part of the unitary inverse DFT. Fails if the imaginary residue
/// exceeds [`IMAG_RESIDUE_TOL`], which indicates a spectrum that is not
/// conjugate-symmetric.
pub fn idft2(plane: &SpectralPlane) -> Result<Vec<f64>> {
    idft2_with(&Fft2d::new(plane.height, plane.width), plane)
}

pub(crate) fn idft2_with(plan: &Fft2d, plane: &SpectralPlane) -> Result<Vec<f64>> {
    let (re, im) = idft2_complex(plan, plane)?;
    let residue = im.iter().fold(0.0f64, |m, v| m.max(libm::fabs(*v)));
    if residue > IMAG_RESIDUE_TOL {
        return Err(Error::ImaginaryResidue(residue));
    }
    Ok(re)
}

pub(crate) fn idft2_complex(plan: &Fft2d, plane: &SpectralPlane) -> Result<(Vec<f64>, Vec<f64>)> {
    if plan.dims() != (plane.height, plane.width)
        || plane.real.len() != plane.height * plane.width
        || plane.imag.len() != plane.real.len()
    {
        bail!(Shape, "malformed spectral plane");
    }
    let mut buf = plane.to_complex();
    plan.process(&mut buf, true);
    let norm = 1.0 / libm::sqrt((plane.height * plane.width) as f64);
    Ok((
        buf.iter().map(|z| z.re * norm).collect(),
        buf.iter().map(|z| z.im * norm).collect(),
    ))
}

pub fn decompose(plane: &SpectralPlane) -> SpectralDecomp {
    let (amplitude, phase) = plane
        .real
        .iter()
        .zip(&plane.imag)
        .map(|(&re, &im)| {
            let a = libm::hypot(re, im);
            let p = if a < PHASE_FLOOR { 0.0 } else { libm::atan2(im, re) };
            (a, p)
        })
        .unzip();
    SpectralDecomp {
        height: plane.height,
        width: plane.width,
        amplitude,
        phase,
    }
}

pub fn recompose(d: &SpectralDecomp) -> SpectralPlane {
    let (real, imag) = d
        .amplitude
        .iter()
        .zip(&d.phase)
        .map(|(&a, &p)| (a * libm::cos(p), a * libm::sin(p)))
        .unzip();
    SpectralPlane {
        height: d.height,
        width: d.width,
        real,
        imag,
    }
}

/// Binary low-frequency mask `Φ_β`, stored in unshifted spectral layout.
#[derive(Debug, Clone, PartialEq)]
pub struct FreqMask {
    pub beta: f64,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl FreqMask {
    /// Ones inside the centred rectangle of half-extents `⌊β·H/2⌋ × ⌊β·W/2⌋`.
    pub fn new(height: usize, width: usize, beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta <= 1.0) {
            bail!(InvalidArgument, "mask scale {beta} not in (0, 1]");
        }
        if height == 0 || width == 0 {
            bail!(InvalidArgument, "empty mask");
        }
        let half_h = libm::floor(beta * height as f64 / 2.0) as usize;
        let half_w = libm::floor(beta * width as f64 / 2.0) as usize;
        // Centred layout: DC sits at (H/2, W/2).
        let (ch, cw) = (height / 2, width / 2);
        let mut shifted = vec![0.0; height * width];
        for y in 0..height {
            for x in 0..width {
                if y.abs_diff(ch) <= half_h && x.abs_diff(cw) <= half_w {
                    shifted[y * width + x] = 1.0;
                }
            }
        }
        Ok(Self {
            beta,
            height,
            width,
            values: ifftshift(&shifted, height, width),
        })
    }

    /// All-zero mask (every bin taken from the forward branch).
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            beta: 0.0,
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            beta: 1.0,
            height,
            width,
            values: vec![1.0; height * width],
        }
    }

    pub fn popcount(&self) -> usize {
        self.values.iter().filter(|&&v| v != 0.0).count()
    }
}

pub fn make_freq_mask(height: usize, width: usize, beta: f64) -> Result<FreqMask> {
    FreqMask::new(height, width, beta)
}

/// Moves the centred-layout element at `(y, x)` to the unshifted index.
pub fn ifftshift(grid: &[f64], height: usize, width: usize) -> Vec<f64> {
    let mut out = vec![0.0; grid.len()];
    let (ch, cw) = (height / 2, width / 2);
    for y in 0..height {
        for x in 0..width {
            let uy = (y + height - ch) % height;
            let ux = (x + width - cw) % width;
            out[uy * width + ux] = grid[y * width + x];
        }
    }
    out
}

pub fn fftshift(grid: &[f64], height: usize, width: usize) -> Vec<f64> {
    let mut out = vec![0.0; grid.len()];
    let (ch, cw) = (height / 2, width / 2);
    for y in 0..height {
        for x in 0..width {
            let sy = (y + ch) % height;
            let sx = (x + cw) % width;
            out[sy * width + sx] = grid[y * width + x];
        }
    }
    out
}

/// Frequency-domain watermark modulation: per channel, amplitude is
/// `Φ·A(reverse) + (1−Φ)·A(forward)` and phase is taken from `forward`
/// everywhere.
pub fn fwm_fuse(forward: &ImageBuffer, reverse: &ImageBuffer, mask: &FreqMask) -> Result<ImageBuffer> {
    forward.ensure_same_shape(reverse)?;
    let (h, w, c) = forward.shape();
    if (mask.height, mask.width) != (h, w) {
        bail!(Shape, "mask {}x{} vs image {h}x{w}", mask.height, mask.width);
    }
    let plan = Fft2d::new(h, w);
    let mut out = ImageBuffer::zeros(h, w, c);
    for ch in 0..c {
        let fwd = decompose(&dft2_with(&plan, forward.plane(ch))?);
        let rev = decompose(&dft2_with(&plan, reverse.plane(ch))?);
        let amplitude = fwd
            .amplitude
            .iter()
            .zip(&rev.amplitude)
            .zip(&mask.values)
            .map(|((&af, &ar), &m)| m * ar + (1.0 - m) * af)
            .collect();
        let fused = SpectralDecomp {
            height: h,
            width: w,
            amplitude,
            phase: fwd.phase,
        };
        let spatial = idft2_with(&plan, &recompose(&fused))?;
        out.plane_mut(ch).copy_from_slice(&spatial);
    }
    Ok(out)
}

/// Linear perturbation ramp `L(t) = L_min + (L_max − L_min)·t/t_max`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationSchedule {
    pub l_min: f64,
    pub l_max: f64,
    pub t_max: usize,
}

impl PerturbationSchedule {
    pub fn new(l_min: f64, l_max: f64, t_max: usize) -> Result<Self> {
        if !(0.0 <= l_min && l_min <= l_max) || !l_max.is_finite() {
            bail!(InvalidArgument, "need 0 <= l_min <= l_max, got {l_min}, {l_max}");
        }
        if t_max == 0 {
            bail!(InvalidArgument, "t_max must be positive");
        }
        Ok(Self { l_min, l_max, t_max })
    }

    pub fn none(t_max: usize) -> Self {
        Self {
            l_min: 0.0,
            l_max: 0.0,
            t_max: t_max.max(1),
        }
    }

    pub fn amplitude(&self, t: usize) -> Result<f64> {
        if t > self.t_max {
            return Err(Error::Timestep { t, t_max: self.t_max });
        }
        Ok(self.l_min + (self.l_max - self.l_min) * t as f64 / self.t_max as f64)
    }
}

pub fn perturbation_amplitude(s: &PerturbationSchedule, t: usize) -> Result<f64> {
    s.amplitude(t)
}

/// How the perturbation amplitude is applied to an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PerturbationMode {
    /// `img + L·z`, `z` standard normal per pixel.
    #[default]
    Gaussian,
    /// `img + L`, a constant offset.
    Constant,
}

pub fn apply_perturbation(
    img: &ImageBuffer,
    amplitude: f64,
    mode: PerturbationMode,
    rng: &mut SeededRng,
) -> Result<ImageBuffer> {
    if !(amplitude >= 0.0) {
        bail!(InvalidArgument, "perturbation amplitude {amplitude} < 0");
    }
    if amplitude == 0.0 {
        return Ok(img.clone());
    }
    let mut out = img.clone();
    match mode {
        PerturbationMode::Gaussian => out.data_mut().iter_mut().for_each(|v| *v += amplitude * rng.normal()),
        PerturbationMode::Constant => out.data_mut().iter_mut().for_each(|v| *v += amplitude),
    }
    Ok(out)
}
