//! Channel-planar floating point images and patch geometry.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Error, Result};
use crate::rng::SeededRng;

/// An `height × width × channels` image with channel-planar, row-major
/// storage. Nominal range is `[0, 1]`; values outside are allowed while a
/// diffusion chain is running and are clamped only on export.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            bail!(InvalidArgument, "channel count {channels} not in {{1, 3}}");
        }
        if height == 0 || width == 0 {
            bail!(InvalidArgument, "empty image {height}x{width}");
        }
        if data.len() != height * width * channels {
            bail!(
                Shape,
                "data length {} != {height}x{width}x{channels}",
                data.len()
            );
        }
        if data.iter().any(|v| !v.is_finite()) {
            bail!(InvalidArgument, "non-finite intensity");
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self::new(height, width, channels, vec![value; height * width * channels])
            .expect("valid filled image")
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self::zeros(other.height, other.width, other.channels)
    }

    /// Builds an image from `f(channel, row, col)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(height, width, channels, data).expect("valid generated image")
    }

    /// Standard normal noise of the given shape.
    pub fn gaussian(height: usize, width: usize, channels: usize, rng: &mut SeededRng) -> Self {
        Self::from_fn(height, width, channels, |_, _, _| rng.normal())
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape() == other.shape()
    }

    pub fn ensure_same_shape(&self, other: &Self) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(alloc::format!(
                "{:?} vs {:?}",
                self.shape(),
                other.shape()
            )))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    /// Elementwise combination of two same-shape images.
    /// Like [`map`](Self::map) but `FnMut`, visiting values in storage order
    /// with their flat index.
    pub fn map_indexed(&self, mut f: impl FnMut(usize, f64) -> f64) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().enumerate().for_each(|(i, v)| *v = f(i, *v));
        out
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.ensure_same_shape(other)?;
        Ok(Self {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            ..*self
        })
    }

    /// `a·self + b·other`.
    pub fn lincomb(&self, a: f64, other: &Self, b: f64) -> Result<Self> {
        self.zip_with(other, |x, y| a * x + b * y)
    }

    pub fn scale(&self, k: f64) -> Self {
        self.map(|v| k * v)
    }

    pub fn clamped(&self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| libm::fabs(a - b))
            .fold(0.0, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Copy of the square window `r`.
    pub fn crop(&self, r: PatchRect) -> Result<Self> {
        r.check_within(self.height, self.width)?;
        Ok(Self::from_fn(r.size, r.size, self.channels, |c, y, x| {
            self.get(c, r.top + y, r.left + x)
        }))
    }

    /// Writes `patch` into the window `r`.
    pub fn paste(&mut self, patch: &Self, r: PatchRect) -> Result<()> {
        r.check_within(self.height, self.width)?;
        if patch.height != r.size || patch.width != r.size || patch.channels != self.channels {
            bail!(Shape, "patch {:?} does not fit rect of size {}", patch.shape(), r.size);
        }
        for c in 0..self.channels {
            for y in 0..r.size {
                for x in 0..r.size {
                    self.set(c, r.top + y, r.left + x, patch.get(c, y, x));
                }
            }
        }
        Ok(())
    }

    /// Clamp to `[0,1]` and quantize with round-half-up to 8-bit, returning
    /// interleaved (pixel-major) bytes.
    pub fn to_bytes_interleaved(&self) -> Vec<u8> {
        let n = self.height * self.width;
        let mut out = vec![0u8; n * self.channels];
        for c in 0..self.channels {
            for (i, &v) in self.plane(c).iter().enumerate() {
                out[i * self.channels + c] = quantize(v);
            }
        }
        out
    }

    /// Inverse of [`Self::to_bytes_interleaved`]: byte `v` maps to `v/255`.
    pub fn from_bytes_interleaved(
        height: usize,
        width: usize,
        channels: usize,
        bytes: &[u8],
    ) -> Result<Self> {
        if bytes.len() != height * width * channels {
            bail!(Shape, "{} bytes for {height}x{width}x{channels}", bytes.len());
        }
        Self::new(height, width, channels, vec![0.0; bytes.len()]).map(|mut img| {
            let n = height * width;
            for c in 0..channels {
                let plane = img.plane_mut(c);
                for i in 0..n {
                    plane[i] = bytes[i * channels + c] as f64 / 255.0;
                }
            }
            img
        })
    }

    /// Snap to the 8-bit grid without leaving floating point.
    pub fn quantized(&self) -> Self {
        self.map(|v| quantize(v) as f64 / 255.0)
    }
}

/// Clamp to `[0,1]`, then `floor(v·255 + 0.5)`.
#[inline]
pub fn quantize(v: f64) -> u8 {
    let v = v.clamp(0.0, 1.0);
    libm::floor(v * 255.0 + 0.5) as u8
}

/// Square window inside an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PatchRect {
    pub top: usize,
    pub left: usize,
    pub size: usize,
}

impl PatchRect {
    pub fn new(top: usize, left: usize, size: usize) -> Self {
        Self { top, left, size }
    }

    pub fn full(size: usize) -> Self {
        Self::new(0, 0, size)
    }

    pub fn check_within(&self, height: usize, width: usize) -> Result<()> {
        if self.size == 0 || self.top + self.size > height || self.left + self.size > width {
            return Err(Error::OutOfBounds {
                top: self.top,
                left: self.left,
                size: self.size,
                height,
                width,
            });
        }
        Ok(())
    }
}

/// `n` rects drawn uniformly over all valid top-left corners. Duplicates are
/// allowed.
pub fn random_patch_rects(
    rng: &mut SeededRng,
    n: usize,
    size: usize,
    height: usize,
    width: usize,
) -> Result<Vec<PatchRect>> {
    if n == 0 {
        bail!(InvalidArgument, "patch count must be >= 1");
    }
    if size == 0 || size > height || size > width {
        return Err(Error::OutOfBounds {
            top: 0,
            left: 0,
            size,
            height,
            width,
        });
    }
    Ok((0..n)
        .map(|_| {
            let top = rng.range_inclusive(0, height - size);
            let left = rng.range_inclusive(0, width - size);
            PatchRect::new(top, left, size)
        })
        .collect())
}
