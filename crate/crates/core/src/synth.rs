//! Synthetic "natural-looking" test images: a tilted colour gradient, a few
//! soft-edged shapes, faint texture and sensor-like noise.

use alloc::vec::Vec;

use crate::image::ImageBuffer;
use crate::rng::SeededRng;

enum Shape {
    Disc { cy: f64, cx: f64, r: f64 },
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
}

impl Shape {
    /// Signed distance, negative inside.
    fn distance(&self, y: f64, x: f64) -> f64 {
        match *self {
            Shape::Disc { cy, cx, r } => libm::hypot(y - cy, x - cx) - r,
            Shape::Rect { y0, x0, y1, x1 } => {
                let dy = (y0 - y).max(y - y1);
                let dx = (x0 - x).max(x - x1);
                dy.max(dx)
            }
        }
    }
}

fn smoothstep(edge: f64, d: f64) -> f64 {
    let t = (0.5 - d / (2.0 * edge)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// One synthetic image with values in `[0,1]` (not quantized).
pub fn synth_image(rng: &mut SeededRng, height: usize, width: usize, channels: usize) -> ImageBuffer {
    let (hf, wf) = (height as f64, width as f64);
    let angle = rng.uniform() * core::f64::consts::TAU;
    let (gy, gx) = (libm::sin(angle), libm::cos(angle));
    let lo: Vec<f64> = (0..channels).map(|_| 0.15 + 0.35 * rng.uniform()).collect();
    let hi: Vec<f64> = (0..channels).map(|_| 0.5 + 0.35 * rng.uniform()).collect();

    let count = 3 + rng.below(4);
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        let colour: Vec<f64> = (0..channels).map(|_| 0.1 + 0.8 * rng.uniform()).collect();
        let shape = if rng.coin() {
            Shape::Disc {
                cy: rng.uniform() * hf,
                cx: rng.uniform() * wf,
                r: (0.08 + 0.2 * rng.uniform()) * hf.min(wf),
            }
        } else {
            let (y0, x0) = (rng.uniform() * hf * 0.8, rng.uniform() * wf * 0.8);
            Shape::Rect {
                y0,
                x0,
                y1: y0 + (0.1 + 0.3 * rng.uniform()) * hf,
                x1: x0 + (0.1 + 0.3 * rng.uniform()) * wf,
            }
        };
        shapes.push((shape, colour, 0.6 + 0.4 * rng.uniform()));
    }

    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            let period = 3.0 + 9.0 * rng.uniform();
            let theta = rng.uniform() * core::f64::consts::TAU;
            (libm::sin(theta) / period, libm::cos(theta) / period, rng.uniform() * core::f64::consts::TAU)
        })
        .collect();

    let mut img = ImageBuffer::from_fn(height, width, channels, |c, y, x| {
        let (yf, xf) = (y as f64, x as f64);
        let t = ((yf / hf - 0.5) * gy + (xf / wf - 0.5) * gx + 0.75) / 1.5;
        let mut v = lo[c] + (hi[c] - lo[c]) * t.clamp(0.0, 1.0);
        for (shape, colour, alpha) in &shapes {
            let a = alpha * smoothstep(1.5, shape.distance(yf, xf));
            v = (1.0 - a) * v + a * colour[c];
        }
        let tex: f64 = waves
            .iter()
            .map(|&(fy, fx, ph)| libm::sin(core::f64::consts::TAU * (fy * yf + fx * xf) + ph))
            .sum();
        v + 0.012 * tex
    });
    for v in img.data_mut() {
        *v = (*v + 0.01 * rng.normal()).clamp(0.0, 1.0);
    }
    img
}

/// `n` images from one master seed; image `i` uses fork `i`.
pub fn synth_corpus(seed: u64, n: usize, height: usize, width: usize, channels: usize) -> Vec<ImageBuffer> {
    let master = SeededRng::new(seed);
    (0..n)
        .map(|i| synth_image(&mut master.fork(i as u64), height, width, channels))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let a = synth_corpus(9, 3, 40, 50, 3);
        let b = synth_corpus(9, 3, 40, 50, 3);
        assert_eq!(a, b);
        assert_ne!(a[0], a[1]);
        for img in &a {
            assert_eq!(img.shape(), (40, 50, 3));
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn has_structure() {
        let img = synth_image(&mut SeededRng::new(1), 64, 64, 1);
        let mean = img.mean();
        let var = img.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / img.len() as f64;
        assert!(var > 1e-3);
    }
}
