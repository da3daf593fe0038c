//! Orthonormal 2-D DCT-II on square blocks.

use alloc::vec::Vec;

/// Precomputed basis for `n×n` blocks. `forward` and `inverse` are exact
/// transposes, so the pair is orthonormal.
#[derive(Debug, Clone)]
pub struct BlockDct {
    n: usize,
    basis: Vec<f64>,
}

impl BlockDct {
    pub fn new(n: usize) -> Self {
        let mut basis = Vec::with_capacity(n * n);
        for k in 0..n {
            let norm = if k == 0 {
                libm::sqrt(1.0 / n as f64)
            } else {
                libm::sqrt(2.0 / n as f64)
            };
            for i in 0..n {
                let arg = core::f64::consts::PI * (2 * i + 1) as f64 * k as f64 / (2 * n) as f64;
                basis.push(norm * libm::cos(arg));
            }
        }
        Self { n, basis }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    /// `block` is row-major `n×n`; returns coefficients indexed `[u*n + v]`
    /// (u vertical frequency, v horizontal).
    pub fn forward(&self, block: &[f64]) -> Vec<f64> {
        self.apply(block, false)
    }

    pub fn inverse(&self, coeffs: &[f64]) -> Vec<f64> {
        self.apply(coeffs, true)
    }

    fn apply(&self, src: &[f64], inverse: bool) -> Vec<f64> {
        let n = self.n;
        assert_eq!(src.len(), n * n);
        let m = |k: usize, i: usize| {
            if inverse {
                self.basis[i * n + k]
            } else {
                self.basis[k * n + i]
            }
        };
        let mut rows = alloc::vec![0.0; n * n];
        for y in 0..n {
            for k in 0..n {
                rows[y * n + k] = (0..n).map(|x| m(k, x) * src[y * n + x]).sum();
            }
        }
        let mut out = alloc::vec![0.0; n * n];
        for k in 0..n {
            for x in 0..n {
                out[k * n + x] = (0..n).map(|y| m(k, y) * rows[y * n + x]).sum();
            }
        }
        out
    }
}

/// Copies the `n×n` block at block coordinates `(by, bx)` out of a plane.
pub(crate) fn read_block(plane: &[f64], width: usize, n: usize, by: usize, bx: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * n);
    for y in 0..n {
        let row = (by * n + y) * width + bx * n;
        out.extend_from_slice(&plane[row..row + n]);
    }
    out
}

pub(crate) fn write_block(plane: &mut [f64], width: usize, n: usize, by: usize, bx: usize, block: &[f64]) {
    for y in 0..n {
        let row = (by * n + y) * width + bx * n;
        plane[row..row + n].copy_from_slice(&block[y * n..y * n + n]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    /// Textbook quadruple sum.
    fn naive(block: &[f64], n: usize) -> Vec<f64> {
        let c = |k: usize| if k == 0 { libm::sqrt(1.0 / n as f64) } else { libm::sqrt(2.0 / n as f64) };
        let pi = core::f64::consts::PI;
        let mut out = alloc::vec![0.0; n * n];
        for u in 0..n {
            for v in 0..n {
                let mut s = 0.0;
                for y in 0..n {
                    for x in 0..n {
                        s += block[y * n + x]
                            * libm::cos(pi * (2 * y + 1) as f64 * u as f64 / (2 * n) as f64)
                            * libm::cos(pi * (2 * x + 1) as f64 * v as f64 / (2 * n) as f64);
                    }
                }
                out[u * n + v] = c(u) * c(v) * s;
            }
        }
        out
    }

    #[test]
    fn matches_naive_and_inverts() {
        let mut rng = SeededRng::new(1);
        for n in [4, 8] {
            let dct = BlockDct::new(n);
            let block: Vec<f64> = (0..n * n).map(|_| rng.uniform()).collect();
            let fast = dct.forward(&block);
            for (a, b) in fast.iter().zip(naive(&block, n)) {
                assert!((a - b).abs() < 1e-12);
            }
            let back = dct.inverse(&fast);
            for (a, b) in back.iter().zip(&block) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_block_is_dc_only() {
        let dct = BlockDct::new(8);
        let c = dct.forward(&[0.5; 64]);
        assert!((c[0] - 4.0).abs() < 1e-12);
        assert!(c[1..].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn block_io_roundtrip() {
        let mut plane: Vec<f64> = (0..16 * 24).map(|i| i as f64).collect();
        let b = read_block(&plane, 24, 8, 1, 2);
        assert_eq!(b[0], (8 * 24 + 16) as f64);
        let orig = plane.clone();
        write_block(&mut plane, 24, 8, 1, 2, &b);
        assert_eq!(plane, orig);
    }
}
