//! Blind watermark codecs: spatial LSB, block-DCT coefficient pairs and
//! DFT-magnitude carriers.
//!
//! All three embed a 16×16 binary mark into the luminance plane. For RGB
//! input the luminance change is added equally to every channel, which
//! moves luminance by exactly that amount and leaves chroma untouched.
//! Embedders return images on the 8-bit grid, and the DCT and DFT embedders
//! re-check their margins after quantization so that extraction of an
//! unattacked image is exact.

use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::fmt;
use core::str::FromStr;

use crate::dct::{read_block, write_block, BlockDct};
use crate::error::{bail, Error, Result};
use crate::fft::Fft2d;
use crate::image::{quantize, ImageBuffer};
use crate::rng::SeededRng;
use crate::spectral::{dft2_with, idft2_with, SpectralPlane};

pub const WATERMARK_SIDE: usize = 16;
pub const WATERMARK_BITS: usize = WATERMARK_SIDE * WATERMARK_SIDE;

/// ITU-R BT.601 luma weights.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// A 16×16 binary watermark, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct WatermarkBits {
    bits: Vec<bool>,
}

impl WatermarkBits {
    pub fn from_bits(bits: Vec<bool>) -> Result<Self> {
        if bits.len() != WATERMARK_BITS {
            bail!(Shape, "watermark needs {WATERMARK_BITS} bits, got {}", bits.len());
        }
        Ok(Self { bits })
    }

    pub fn random(rng: &mut SeededRng) -> Self {
        Self {
            bits: (0..WATERMARK_BITS).map(|_| rng.coin()).collect(),
        }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * WATERMARK_SIDE + col]
    }

    /// 32 lines of 8 `0`/`1` characters.
    pub fn to_text(&self) -> alloc::string::String {
        let mut s = alloc::string::String::with_capacity(WATERMARK_BITS + 32);
        for line in self.bits.chunks(8) {
            line.iter().for_each(|&b| s.push(if b { '1' } else { '0' }));
            s.push('\n');
        }
        s
    }

    /// Inverse of [`to_text`](Self::to_text). Blank lines and surrounding
    /// whitespace are ignored, but every line must hold exactly 8 digits.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut bits = Vec::with_capacity(WATERMARK_BITS);
        let mut lines = 0;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            if line.len() != 8 {
                bail!(Format, "watermark line {:?} is not 8 characters", line);
            }
            for ch in line.chars() {
                match ch {
                    '0' => bits.push(false),
                    '1' => bits.push(true),
                    other => bail!(Format, "unexpected watermark character {other:?}"),
                }
            }
            lines += 1;
        }
        if lines != 32 {
            bail!(Format, "watermark has {lines} lines, expected 32");
        }
        Self::from_bits(bits)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scheme {
    Lsb,
    Dct,
    Dft,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::Lsb, Scheme::Dct, Scheme::Dft];

    pub fn tag(self) -> &'static str {
        match self {
            Scheme::Lsb => "lsb",
            Scheme::Dct => "dct",
            Scheme::Dft => "dft",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lsb" => Ok(Scheme::Lsb),
            "dct" => Ok(Scheme::Dct),
            "dft" => Ok(Scheme::Dft),
            other => Err(Error::InvalidArgument(alloc::format!("unknown codec {other:?}"))),
        }
    }
}

/// Codec parameters. `key` seeds the LSB site layout and the DFT carrier
/// assignment, so embedder and extractor must share it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CodecConfig {
    pub scheme: Scheme,
    pub key: u64,
    /// Bit plane written by LSB (0 = least significant).
    pub lsb_plane: u32,
    /// Sites per bit; `None` uses `⌊HW/256⌋`.
    pub lsb_replication: Option<usize>,
    pub dct_block: usize,
    /// Coefficient pair `(u, v)` compared by the DCT codec.
    pub dct_pair: [(usize, usize); 2],
    /// Minimum coefficient difference, unit intensity.
    pub dct_margin: f64,
    /// Carrier ring radius as a fraction of the Nyquist radius.
    pub dft_radius: f64,
    /// Relative distance of a carrier from its neighbourhood median.
    pub dft_strength: f64,
    /// Neighbour magnitude floor, unitary spectrum units.
    pub dft_floor: f64,
    /// Carriers per bit, decided by majority. Odd.
    pub dft_replication: usize,
}

impl CodecConfig {
    pub fn new(scheme: Scheme) -> Self {
        Self {
            scheme,
            key: 0x5eed,
            lsb_plane: 0,
            lsb_replication: None,
            dct_block: 8,
            dct_pair: [(2, 3), (3, 2)],
            dct_margin: 0.02,
            dft_radius: 0.35,
            dft_strength: 0.25,
            dft_floor: 0.016,
            dft_replication: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lsb_plane > 7 {
            bail!(InvalidArgument, "LSB plane {} outside 0..=7", self.lsb_plane);
        }
        if self.lsb_replication == Some(0) {
            bail!(InvalidArgument, "LSB replication must be >= 1");
        }
        if self.dct_block < 4 {
            bail!(InvalidArgument, "DCT block must be at least 4");
        }
        let [a, b] = self.dct_pair;
        if a == b || a.0.max(a.1).max(b.0).max(b.1) >= self.dct_block || a == (0, 0) || b == (0, 0) {
            bail!(InvalidArgument, "DCT pair must be two distinct AC coefficients inside the block");
        }
        if !(self.dct_margin > 0.0) {
            bail!(InvalidArgument, "DCT margin must be positive");
        }
        if !(self.dft_radius > 0.0 && self.dft_radius < 1.0) {
            bail!(InvalidArgument, "DFT radius fraction must lie in (0,1)");
        }
        if !(self.dft_strength > 0.0 && self.dft_strength < 0.5) {
            bail!(InvalidArgument, "DFT strength must lie in (0,0.5)");
        }
        if !(self.dft_floor > 0.0) {
            bail!(InvalidArgument, "DFT floor must be positive");
        }
        if self.dft_replication % 2 == 0 {
            bail!(InvalidArgument, "DFT replication must be odd, got {}", self.dft_replication);
        }
        Ok(())
    }
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self::new(Scheme::Lsb)
    }
}

/// `I_w = E(I, w)`.
pub fn embed(img: &ImageBuffer, wm: &WatermarkBits, cfg: &CodecConfig) -> Result<ImageBuffer> {
    cfg.validate()?;
    match cfg.scheme {
        Scheme::Lsb => lsb_embed(img, wm, cfg),
        Scheme::Dct => dct_embed(img, wm, cfg),
        Scheme::Dft => dft_embed(img, wm, cfg),
    }
}

/// `w' = D(I_w')`. Blind: only the image and the shared configuration.
pub fn extract(img: &ImageBuffer, cfg: &CodecConfig) -> Result<WatermarkBits> {
    cfg.validate()?;
    match cfg.scheme {
        Scheme::Lsb => lsb_extract(img, cfg),
        Scheme::Dct => dct_extract(img, cfg),
        Scheme::Dft => dft_extract(img, cfg),
    }
}

pub fn luminance(img: &ImageBuffer) -> Vec<f64> {
    if img.channels() == 1 {
        return img.plane(0).to_vec();
    }
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    (0..r.len())
        .map(|i| LUMA[0] * r[i] + LUMA[1] * g[i] + LUMA[2] * b[i])
        .collect()
}

/// Adds `delta` (one value per pixel) to every channel.
fn add_luma(img: &ImageBuffer, delta: &[f64]) -> ImageBuffer {
    let mut out = img.clone();
    for c in 0..img.channels() {
        out.plane_mut(c).iter_mut().zip(delta).for_each(|(v, d)| *v += d);
    }
    out
}

// ---------------------------------------------------------------- LSB

fn lsb_sites(cfg: &CodecConfig, pixels: usize) -> Result<Vec<usize>> {
    let per_bit = cfg.lsb_replication.unwrap_or(pixels / WATERMARK_BITS);
    let needed = per_bit * WATERMARK_BITS;
    if per_bit == 0 || needed > pixels {
        return Err(Error::Capacity {
            needed: needed.max(WATERMARK_BITS),
            available: pixels,
        });
    }
    let mut order: Vec<usize> = (0..pixels).collect();
    SeededRng::new(cfg.key).shuffle(&mut order);
    order.truncate(needed);
    Ok(order)
}

/// 8-bit luminance code of a pixel: the byte itself for grayscale, the
/// rounded weighted byte sum for RGB.
fn luma_code(bytes: &[&[u8]], i: usize) -> i32 {
    if bytes.len() == 1 {
        return bytes[0][i] as i32;
    }
    let y: f64 = (0..3).map(|c| LUMA[c] * bytes[c][i] as f64).sum();
    libm::floor(y + 0.5) as i32
}

fn channel_bytes(img: &ImageBuffer) -> Vec<Vec<u8>> {
    (0..img.channels())
        .map(|c| img.plane(c).iter().map(|&v| quantize(v)).collect())
        .collect()
}

fn lsb_embed(img: &ImageBuffer, wm: &WatermarkBits, cfg: &CodecConfig) -> Result<ImageBuffer> {
    let (h, w, c) = img.shape();
    let sites = lsb_sites(cfg, h * w)?;
    let mut bytes = channel_bytes(img);
    let plane = cfg.lsb_plane;
    let step = 1i32 << plane;
    for (k, &i) in sites.iter().enumerate() {
        let bit = wm.bits()[k % WATERMARK_BITS];
        if c == 1 {
            let b = bytes[0][i];
            bytes[0][i] = if bit { b | (1 << plane) } else { b & !(1 << plane) };
            continue;
        }
        let base: Vec<i32> = (0..3).map(|ch| bytes[ch][i] as i32).collect();
        let wants = |d: i32| {
            let shifted: Vec<u8> = base.iter().map(|&b| (b + d).clamp(0, 255) as u8).collect();
            let y: f64 = (0..3).map(|ch| LUMA[ch] * shifted[ch] as f64).sum();
            let code = libm::floor(y + 0.5) as i32;
            (((code >> plane) & 1) == 1) == bit
        };
        // Smallest equal shift of all three channels that sets the bit.
        let limit = 2 * step + 2;
        let d = (0..=limit)
            .flat_map(|m| [-m, m])
            .find(|&d| wants(d))
            .ok_or_else(|| Error::InvalidArgument(alloc::format!("pixel {i} cannot carry bit")))?;
        for (ch, b) in base.iter().enumerate() {
            bytes[ch][i] = (b + d).clamp(0, 255) as u8;
        }
    }
    let data = bytes.iter().flat_map(|p| p.iter().map(|&b| b as f64 / 255.0)).collect();
    ImageBuffer::new(h, w, c, data)
}

fn lsb_extract(img: &ImageBuffer, cfg: &CodecConfig) -> Result<WatermarkBits> {
    let (h, w, _) = img.shape();
    let sites = lsb_sites(cfg, h * w)?;
    let bytes = channel_bytes(img);
    let views: Vec<&[u8]> = bytes.iter().map(Vec::as_slice).collect();
    let mut votes = vec![0i64; WATERMARK_BITS];
    for (k, &i) in sites.iter().enumerate() {
        let bit = (luma_code(&views, i) >> cfg.lsb_plane) & 1 == 1;
        votes[k % WATERMARK_BITS] += if bit { 1 } else { -1 };
    }
    // Ties decode as 0.
    WatermarkBits::from_bits(votes.iter().map(|&v| v > 0).collect())
}

// ---------------------------------------------------------------- DCT

const MAX_REFINE: usize = 12;

fn dct_blocks(cfg: &CodecConfig, h: usize, w: usize) -> Result<(usize, usize)> {
    let n = cfg.dct_block;
    let (bh, bw) = (h / n, w / n);
    if bh * bw < WATERMARK_BITS {
        return Err(Error::Capacity {
            needed: WATERMARK_BITS,
            available: bh * bw,
        });
    }
    Ok((bh, bw))
}

/// `c₁ − c₂` for every block in raster order.
fn dct_differences(plane: &[f64], w: usize, bh: usize, bw: usize, cfg: &CodecConfig, dct: &BlockDct) -> Vec<f64> {
    let n = cfg.dct_block;
    let [(u1, v1), (u2, v2)] = cfg.dct_pair;
    let mut out = Vec::with_capacity(bh * bw);
    for by in 0..bh {
        for bx in 0..bw {
            let c = dct.forward(&read_block(plane, w, n, by, bx));
            out.push(c[u1 * n + v1] - c[u2 * n + v2]);
        }
    }
    out
}

fn dct_embed(img: &ImageBuffer, wm: &WatermarkBits, cfg: &CodecConfig) -> Result<ImageBuffer> {
    let (h, w, _) = img.shape();
    let (bh, bw) = dct_blocks(cfg, h, w)?;
    let n = cfg.dct_block;
    let dct = BlockDct::new(n);
    let [(u1, v1), (u2, v2)] = cfg.dct_pair;
    let sign = |k: usize| if wm.bits()[k % WATERMARK_BITS] { 1.0 } else { -1.0 };
    let mut current = img.quantized();
    for round in 0..MAX_REFINE {
        let luma = luminance(&current);
        let diffs = dct_differences(&luma, w, bh, bw, cfg, &dct);
        let target = cfg.dct_margin * (1.0 + 0.25 * round as f64);
        let mut delta = vec![0.0; h * w];
        let mut changed = false;
        for (k, &d) in diffs.iter().enumerate() {
            let s = sign(k);
            if s * d >= cfg.dct_margin {
                continue;
            }
            changed = true;
            let half = (target - s * d) / 2.0;
            let mut coeffs = vec![0.0; n * n];
            coeffs[u1 * n + v1] = s * half;
            coeffs[u2 * n + v2] = -s * half;
            write_block(&mut delta, w, n, k / bw, k % bw, &dct.inverse(&coeffs));
        }
        if !changed {
            break;
        }
        current = add_luma(&current, &delta).quantized();
    }
    Ok(current)
}

fn dct_extract(img: &ImageBuffer, cfg: &CodecConfig) -> Result<WatermarkBits> {
    let (h, w, _) = img.shape();
    let (bh, bw) = dct_blocks(cfg, h, w)?;
    let dct = BlockDct::new(cfg.dct_block);
    let diffs = dct_differences(&luminance(img), w, bh, bw, cfg, &dct);
    let mut sums = vec![0.0; WATERMARK_BITS];
    for (k, d) in diffs.iter().enumerate() {
        sums[k % WATERMARK_BITS] += d;
    }
    WatermarkBits::from_bits(sums.iter().map(|&s| s > 0.0).collect())
}

// ---------------------------------------------------------------- DFT

/// Carrier bins and their four neighbours, as unshifted flat indices.
/// Carrier `k` votes for bit `k % 256`.
struct DftLayout {
    carriers: Vec<usize>,
    mirrors: Vec<usize>,
    neighbours: Vec<[usize; 4]>,
}

fn wrap(u: i64, n: usize) -> usize {
    u.rem_euclid(n as i64) as usize
}

fn dft_layout(cfg: &CodecConfig, h: usize, w: usize) -> Result<DftLayout> {
    let r0 = cfg.dft_radius * (h.min(w) as f64) / 2.0;
    let (hu, hv) = (h as i64 / 2 - 2, w as i64 / 2 - 2);
    let mut cands: Vec<(f64, i64, i64)> = Vec::new();
    for u in 0..=hu.max(0) {
        for v in -hv..=hv {
            if (u == 0 && v <= 0) || (u + v).rem_euclid(2) != 0 {
                continue;
            }
            let r = libm::sqrt((u * u + v * v) as f64);
            if r < 2.0 {
                continue;
            }
            cands.push((libm::fabs(r - r0), u, v));
        }
    }
    let needed = WATERMARK_BITS * cfg.dft_replication;
    if cands.len() < needed {
        return Err(Error::Capacity {
            needed,
            available: cands.len(),
        });
    }
    cands.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap_or(Ordering::Equal)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    cands.truncate(needed);
    SeededRng::new(cfg.key).shuffle(&mut cands);
    let idx = |u: i64, v: i64| wrap(u, h) * w + wrap(v, w);
    Ok(DftLayout {
        carriers: cands.iter().map(|&(_, u, v)| idx(u, v)).collect(),
        mirrors: cands.iter().map(|&(_, u, v)| idx(-u, -v)).collect(),
        neighbours: cands
            .iter()
            .map(|&(_, u, v)| [idx(u - 1, v), idx(u + 1, v), idx(u, v - 1), idx(u, v + 1)])
            .collect(),
    })
}

fn magnitude(p: &SpectralPlane, i: usize) -> f64 {
    libm::hypot(p.real[i], p.imag[i])
}

fn median4(mut v: [f64; 4]) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    0.5 * (v[1] + v[2])
}

/// Rescales bin `i` (and its conjugate partner) to magnitude `m`, keeping
/// its phase; zero bins become real-positive.
fn set_magnitude(p: &mut SpectralPlane, i: usize, mirror: usize, m: f64) {
    let cur = magnitude(p, i);
    let (re, im) = if cur > 1e-15 {
        (p.real[i] * m / cur, p.imag[i] * m / cur)
    } else {
        (m, 0.0)
    };
    p.real[i] = re;
    p.imag[i] = im;
    p.real[mirror] = re;
    p.imag[mirror] = -im;
}

fn mirror_of(i: usize, h: usize, w: usize) -> usize {
    let (u, v) = (i / w, i % w);
    ((h - u) % h) * w + (w - v) % w
}

fn dft_embed(img: &ImageBuffer, wm: &WatermarkBits, cfg: &CodecConfig) -> Result<ImageBuffer> {
    let (h, w, _) = img.shape();
    let layout = dft_layout(cfg, h, w)?;
    let plan = Fft2d::new(h, w);
    let mut current = img.quantized();
    for round in 0..MAX_REFINE {
        let luma = luminance(&current);
        let spec = dft2_with(&plan, &luma)?;
        let mut edited = spec.clone();
        for nb in &layout.neighbours {
            for &i in nb {
                if magnitude(&edited, i) < cfg.dft_floor {
                    set_magnitude(&mut edited, i, mirror_of(i, h, w), cfg.dft_floor);
                }
            }
        }
        let push = 1.0 + 0.5 * round as f64;
        let need = cfg.dft_replication / 2 + 1;
        let mut changed = false;
        let mut plans: Vec<(f64, usize, f64)> = Vec::with_capacity(cfg.dft_replication);
        for (b, &bit) in wm.bits().iter().enumerate() {
            let votes = (b..layout.carriers.len()).step_by(WATERMARK_BITS);
            // Margins are judged against the unedited spectrum, which is what
            // the extractor will see for already-settled carriers.
            let settled = votes
                .clone()
                .filter(|&k| {
                    let m = median4(layout.neighbours[k].map(|j| magnitude(&spec, j)));
                    let d = (cfg.dft_strength * m).max(cfg.dft_floor / 2.0);
                    let a = magnitude(&spec, layout.carriers[k]);
                    if bit {
                        a >= m + d / 2.0
                    } else {
                        a <= m - d / 2.0
                    }
                })
                .count();
            if settled >= need && round > 0 {
                continue;
            }
            // Enforce the cheapest majority; the rest keep their natural value.
            plans.clear();
            for k in votes {
                let m = median4(layout.neighbours[k].map(|j| magnitude(&edited, j)));
                let d = (cfg.dft_strength * m).max(cfg.dft_floor / 2.0) * push;
                let a = magnitude(&edited, layout.carriers[k]);
                let target = if bit { (m + d).max(a) } else { (m - d).min(a).max(0.0) };
                plans.push(((target - a) * (target - a), k, target));
            }
            plans.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap_or(Ordering::Equal).then(x.1.cmp(&y.1)));
            for &(cost, k, target) in &plans[..need] {
                if cost > 0.0 {
                    set_magnitude(&mut edited, layout.carriers[k], layout.mirrors[k], target);
                }
            }
            changed = true;
        }
        if !changed {
            break;
        }
        let mut diff = SpectralPlane::zeros(h, w);
        for i in 0..h * w {
            diff.real[i] = edited.real[i] - spec.real[i];
            diff.imag[i] = edited.imag[i] - spec.imag[i];
        }
        let delta = idft2_with(&plan, &diff)?;
        current = add_luma(&current, &delta).quantized();
    }
    Ok(current)
}

fn dft_extract(img: &ImageBuffer, cfg: &CodecConfig) -> Result<WatermarkBits> {
    let (h, w, _) = img.shape();
    let layout = dft_layout(cfg, h, w)?;
    let spec = dft2_with(&Fft2d::new(h, w), &luminance(img))?;
    let above: Vec<bool> = layout
        .carriers
        .iter()
        .zip(&layout.neighbours)
        .map(|(&i, nb)| magnitude(&spec, i) > median4(nb.map(|j| magnitude(&spec, j))))
        .collect();
    let bits = (0..WATERMARK_BITS)
        .map(|b| {
            let yes = above.iter().skip(b).step_by(WATERMARK_BITS).filter(|&&v| v).count();
            2 * yes > cfg.dft_replication
        })
        .collect();
    WatermarkBits::from_bits(bits)
}
