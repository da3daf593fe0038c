//! Classical image-processing attacks: additive, multiplicative and impulse
//! noise, box filtering and JPEG-style block quantization.

use alloc::format;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::dct::{read_block, write_block, BlockDct};
use crate::error::{bail, Error, Result};
use crate::image::ImageBuffer;
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AttackMethod {
    Identity,
    Gaussian,
    Speckle,
    SaltPepper,
    MeanFilter,
    Jpeg,
}

impl AttackMethod {
    pub fn tag(self) -> &'static str {
        match self {
            AttackMethod::Identity => "identity",
            AttackMethod::Gaussian => "gaussian",
            AttackMethod::Speckle => "speckle",
            AttackMethod::SaltPepper => "saltpepper",
            AttackMethod::MeanFilter => "meanfilter",
            AttackMethod::Jpeg => "jpeg",
        }
    }
}

impl FromStr for AttackMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "identity" => AttackMethod::Identity,
            "gaussian" => AttackMethod::Gaussian,
            "speckle" => AttackMethod::Speckle,
            "saltpepper" => AttackMethod::SaltPepper,
            "meanfilter" => AttackMethod::MeanFilter,
            "jpeg" => AttackMethod::Jpeg,
            other => bail!(InvalidArgument, "unknown attack {other:?}"),
        })
    }
}

/// Method plus its single parameter: variance (gaussian, speckle), density
/// (saltpepper), window side (meanfilter) or quality (jpeg). Identity
/// ignores the parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackSpec {
    pub method: AttackMethod,
    pub param: f64,
}

impl AttackSpec {
    pub fn new(method: AttackMethod, param: f64) -> Result<Self> {
        let spec = Self { method, param };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.param;
        let ok = match self.method {
            AttackMethod::Identity => true,
            AttackMethod::Gaussian | AttackMethod::Speckle => p > 0.0 && p.is_finite(),
            AttackMethod::SaltPepper => p > 0.0 && p < 1.0,
            AttackMethod::MeanFilter => p >= 3.0 && p == libm::trunc(p) && (p as u64) % 2 == 1,
            AttackMethod::Jpeg => (1.0..=100.0).contains(&p) && p == libm::trunc(p),
        };
        if !ok {
            bail!(InvalidArgument, "parameter {p} out of range for {}", self.method.tag());
        }
        Ok(())
    }
}

/// `method:param`, e.g. `gaussian:0.002`, `identity`.
impl FromStr for AttackSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (name, param) = match s.split_once(':') {
            Some((n, p)) => (n, p.parse::<f64>().map_err(|_| Error::InvalidArgument(format!("bad parameter in {s:?}")))?),
            None => (s, 0.0),
        };
        AttackSpec::new(name.parse()?, param)
    }
}

impl fmt::Display for AttackSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.method {
            AttackMethod::Identity => f.write_str("identity"),
            m => write!(f, "{}:{}", m.tag(), self.param),
        }
    }
}

pub fn apply_attack(img: &ImageBuffer, spec: &AttackSpec, rng: &mut SeededRng) -> Result<ImageBuffer> {
    spec.validate()?;
    let out = match spec.method {
        AttackMethod::Identity => img.clone(),
        AttackMethod::Gaussian => {
            let sd = libm::sqrt(spec.param);
            img.map_indexed(|_, v| v + sd * rng.normal())
        }
        AttackMethod::Speckle => {
            let sd = libm::sqrt(spec.param);
            img.map_indexed(|_, v| v + v * sd * rng.normal())
        }
        AttackMethod::SaltPepper => salt_pepper(img, spec.param, rng),
        AttackMethod::MeanFilter => mean_filter(img, spec.param as usize),
        AttackMethod::Jpeg => jpeg(img, spec.param as u32)?,
    };
    Ok(out.clamped())
}

/// Each pixel is hit with probability `density`; hits become 0 or 1 (all
/// channels) with equal probability.
fn salt_pepper(img: &ImageBuffer, density: f64, rng: &mut SeededRng) -> ImageBuffer {
    let (h, w, c) = img.shape();
    let mut out = img.clone();
    for i in 0..h * w {
        let u = rng.uniform();
        if u < density {
            let v = if u < density / 2.0 { 1.0 } else { 0.0 };
            for ch in 0..c {
                out.plane_mut(ch)[i] = v;
            }
        }
    }
    out
}

/// `k×k` box filter with edge replication.
pub fn mean_filter(img: &ImageBuffer, k: usize) -> ImageBuffer {
    let (h, w, c) = img.shape();
    let r = (k / 2) as isize;
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let norm = 1.0 / (k * k) as f64;
    ImageBuffer::from_fn(h, w, c, |ch, y, x| {
        let plane = img.plane(ch);
        let mut s = 0.0;
        for dy in -r..=r {
            let row = clampi(y as isize + dy, h) * w;
            for dx in -r..=r {
                s += plane[row + clampi(x as isize + dx, w)];
            }
        }
        s * norm
    })
}

/// Standard luminance base table (quality 50), row-major.
pub const JPEG_LUMA_BASE: [u32; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// `max(1, round(base·scale/100))` with `scale = 5000/Q` below 50 and
/// `200 − 2Q` otherwise.
pub fn jpeg_quant_table(quality: u32) -> Result<[u32; 64]> {
    if !(1..=100).contains(&quality) {
        bail!(InvalidArgument, "JPEG quality {quality} not in 1..=100");
    }
    let scale = if quality < 50 { 5000.0 / quality as f64 } else { 200.0 - 2.0 * quality as f64 };
    let mut t = [0u32; 64];
    for (dst, &b) in t.iter_mut().zip(&JPEG_LUMA_BASE) {
        *dst = (libm::floor(b as f64 * scale / 100.0 + 0.5) as u32).max(1);
    }
    Ok(t)
}

/// Blockwise DCT quantization of every channel on the 0–255 scale. Frames
/// that are not multiples of 8 are padded by edge replication.
fn jpeg(img: &ImageBuffer, quality: u32) -> Result<ImageBuffer> {
    let table = jpeg_quant_table(quality)?;
    let (h, w, c) = img.shape();
    let (ph, pw) = (h.div_ceil(8) * 8, w.div_ceil(8) * 8);
    let dct = BlockDct::new(8);
    let mut out = ImageBuffer::zeros(h, w, c);
    for ch in 0..c {
        let src = img.plane(ch);
        let mut plane: Vec<f64> = (0..ph * pw)
            .map(|i| src[(i / pw).min(h - 1) * w + (i % pw).min(w - 1)] * 255.0 - 128.0)
            .collect();
        for by in 0..ph / 8 {
            for bx in 0..pw / 8 {
                let mut coeffs = dct.forward(&read_block(&plane, pw, 8, by, bx));
                for (cv, &q) in coeffs.iter_mut().zip(&table) {
                    *cv = libm::round(*cv / q as f64) * q as f64;
                }
                write_block(&mut plane, pw, 8, by, bx, &dct.inverse(&coeffs));
            }
        }
        let dst = out.plane_mut(ch);
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = (plane[y * pw + x] + 128.0) / 255.0;
            }
        }
    }
    Ok(out)
}
