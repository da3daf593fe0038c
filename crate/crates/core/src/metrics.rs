//! PSNR, BER and windowed structural similarity.

use alloc::vec::Vec;

use crate::codecs::WatermarkBits;
use crate::error::{bail, Result};
use crate::image::ImageBuffer;

/// Reported for identical images so CSV cells stay finite.
pub const PSNR_CAP: f64 = 99.0;

/// Fidelity and watermark-survival numbers for one image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricResult {
    pub psnr: f64,
    pub ber: f64,
    pub ssim: f64,
}

/// `10·log10(1/MSE)` on unit-range data over all channels, capped at
/// [`PSNR_CAP`].
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * libm::log10(1.0 / mse)).min(PSNR_CAP))
}

/// PSNR after exporting both images to 8-bit.
pub fn psnr_on_bytes(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    psnr(&a.quantized(), &b.quantized())
}

/// Fraction of differing bits.
pub fn ber(a: &WatermarkBits, b: &WatermarkBits) -> f64 {
    ber_slices(a.bits(), b.bits()).expect("watermarks have equal length")
}

pub fn ber_slices(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        bail!(Shape, "bit strings of length {} and {}", a.len(), b.len());
    }
    Ok(a.iter().zip(b).filter(|(x, y)| x != y).count() as f64 / a.len() as f64)
}

/// Parameters of the structural similarity terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimConfig {
    pub scales: usize,
    pub c1: f64,
    pub c2: f64,
    /// Gaussian window side length.
    pub window: usize,
    pub sigma: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            scales: 5,
            c1: 1e-4,
            c2: 9e-4,
            window: 11,
            sigma: 1.5,
        }
    }
}

impl SsimConfig {
    pub fn single_scale() -> Self {
        Self {
            scales: 1,
            ..Self::default()
        }
    }

    /// Smallest image side the configuration supports.
    pub fn min_side(&self) -> usize {
        (1usize << (self.scales.max(1) - 1)) * self.window
    }

    pub fn check(&self, height: usize, width: usize) -> Result<()> {
        if self.scales == 0 || self.window == 0 || !(self.sigma > 0.0) {
            bail!(InvalidArgument, "degenerate SSIM configuration");
        }
        if height.min(width) < self.min_side() {
            bail!(
                InvalidArgument,
                "{height}x{width} too small for {} scales of a {}-tap window",
                self.scales,
                self.window
            );
        }
        Ok(())
    }

    /// Largest scale count (up to `max`) that fits a `side`-pixel image.
    pub fn scales_for(side: usize, window: usize, max: usize) -> usize {
        (1..=max).rev().find(|&m| (1usize << (m - 1)) * window <= side).unwrap_or(1)
    }
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size as f64 - 1.0) / 2.0;
    let mut k: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - r;
            libm::exp(-d * d / (2.0 * sigma * sigma))
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Mean over valid window positions and channels of
/// `luminance × contrast-structure` at one scale.
pub(crate) fn ssim_factor(a: &ImageBuffer, b: &ImageBuffer, cfg: &SsimConfig) -> f64 {
    let g = gaussian_kernel(cfg.window, cfg.sigma);
    let k = cfg.window;
    let (h, w, c) = a.shape();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut total = 0.0;
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let wt = g[i] * g[j];
                        let (va, vb) = (a.get(ch, y + i, x + j), b.get(ch, y + i, x + j));
                        ma += wt * va;
                        mb += wt * vb;
                        saa += wt * (va * va);
                        sbb += wt * (vb * vb);
                        sab += wt * (va * vb);
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                let lum = (2.0 * (ma * mb) + cfg.c1) / (ma * ma + mb * mb + cfg.c1);
                let cs = (2.0 * cov + cfg.c2) / (va + vb + cfg.c2);
                total += lum * cs;
            }
        }
    }
    total / (c * oh * ow) as f64
}

/// 2×2 mean pooling; trailing odd rows/columns dropped.
pub(crate) fn downsample2(img: &ImageBuffer) -> ImageBuffer {
    let (h, w, c) = img.shape();
    ImageBuffer::from_fn(h / 2, w / 2, c, |ch, y, x| {
        0.25 * (img.get(ch, 2 * y, 2 * x)
            + img.get(ch, 2 * y, 2 * x + 1)
            + img.get(ch, 2 * y + 1, 2 * x)
            + img.get(ch, 2 * y + 1, 2 * x + 1))
    })
}

/// Product over dyadic scales of the per-scale similarity factor.
pub fn ms_ssim(a: &ImageBuffer, b: &ImageBuffer, cfg: &SsimConfig) -> Result<f64> {
    a.ensure_same_shape(b)?;
    cfg.check(a.height(), a.width())?;
    let (mut a, mut b) = (a.clone(), b.clone());
    let mut prod = 1.0;
    for j in 0..cfg.scales {
        if j > 0 {
            a = downsample2(&a);
            b = downsample2(&b);
        }
        prod *= ssim_factor(&a, &b, cfg);
    }
    Ok(prod)
}

/// Single-scale SSIM with an 11×11, σ = 1.5 Gaussian window.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    ms_ssim(a, b, &SsimConfig::single_scale())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn noise(rng: &mut SeededRng, h: usize, w: usize, c: usize) -> ImageBuffer {
        ImageBuffer::from_fn(h, w, c, |_, _, _| rng.uniform())
    }

    #[test]
    fn psnr_cases() {
        let a = ImageBuffer::filled(16, 16, 3, 0.5);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = a.map(|v| v + 1.0 / 255.0);
        assert!((psnr(&a, &b).unwrap() - 48.1308).abs() < 1e-4);
        let c = a.map(|v| v - 0.1);
        assert!((psnr(&a, &c).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &ImageBuffer::zeros(16, 16, 1)).is_err());
    }

    #[test]
    fn psnr_symmetric_and_decreasing() {
        let mut rng = SeededRng::new(1);
        let a = noise(&mut rng, 8, 8, 1);
        let b = noise(&mut rng, 8, 8, 1);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        let mut last = f64::INFINITY;
        for d in [0.001, 0.01, 0.05, 0.2] {
            let p = psnr(&a, &a.map(|v| v + d)).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn ber_cases() {
        let mut rng = SeededRng::new(2);
        let w = WatermarkBits::random(&mut rng);
        assert_eq!(ber(&w, &w), 0.0);
        let inv = WatermarkBits::from_bits(w.bits().iter().map(|b| !b).collect()).unwrap();
        assert_eq!(ber(&w, &inv), 1.0);
        let mut flipped = w.bits().to_vec();
        for b in flipped.iter_mut().take(82) {
            *b = !*b;
        }
        let f = WatermarkBits::from_bits(flipped).unwrap();
        assert_eq!(ber(&w, &f), 0.3203125);
        assert_eq!(alloc::format!("{:.4}", ber(&w, &f)), "0.3203");
        assert!(ber_slices(&[true], &[true, false]).is_err());
    }

    #[test]
    fn ber_permutation_invariant() {
        let mut rng = SeededRng::new(3);
        let (a, b) = (WatermarkBits::random(&mut rng), WatermarkBits::random(&mut rng));
        let mut perm: Vec<usize> = (0..256).collect();
        rng.shuffle(&mut perm);
        let pa = WatermarkBits::from_bits(perm.iter().map(|&i| a.bits()[i]).collect()).unwrap();
        let pb = WatermarkBits::from_bits(perm.iter().map(|&i| b.bits()[i]).collect()).unwrap();
        assert_eq!(ber(&a, &b), ber(&pa, &pb));
    }

    #[test]
    fn ssim_cases() {
        let mut rng = SeededRng::new(4);
        let a = noise(&mut rng, 24, 20, 3);
        let b = noise(&mut rng, 24, 20, 3);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        assert!(ssim(&a, &b).unwrap() < 1.0);
        let zero = ImageBuffer::zeros(16, 16, 1);
        let one = ImageBuffer::filled(16, 16, 1, 1.0);
        let expect = 1e-4 / (1.0 + 1e-4);
        assert!((ssim(&zero, &one).unwrap() - expect).abs() < 1e-15);
        assert!(ssim(&ImageBuffer::zeros(10, 30, 1), &ImageBuffer::zeros(10, 30, 1)).is_err());
    }

    #[test]
    fn kernel_is_normalized_and_symmetric() {
        let k = gaussian_kernel(11, 1.5);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(k[0], k[10]);
        assert!(k[5] > k[4]);
    }

    #[test]
    fn scale_fitting() {
        assert_eq!(SsimConfig::scales_for(176, 11, 5), 5);
        assert_eq!(SsimConfig::scales_for(64, 11, 5), 3);
        assert_eq!(SsimConfig::scales_for(32, 11, 5), 2);
    }
}
