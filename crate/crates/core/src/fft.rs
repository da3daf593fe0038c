//! Complex FFT for arbitrary lengths: iterative radix-2 for powers of two,
//! Bluestein's chirp-z reduction otherwise. 2-D transforms run rows then
//! columns over a row-major buffer.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use num_complex::Complex64;

#[derive(Debug, Clone)]
enum Kind {
    Radix2 { twiddles: Vec<Complex64> },
    Bluestein(Bluestein),
}

#[derive(Debug, Clone)]
struct Bluestein {
    chirp: Vec<Complex64>,
    /// Forward transform of the conjugate chirp, zero-padded to `inner.len`.
    kernel_hat: Vec<Complex64>,
    inner: Radix2Plan,
}

#[derive(Debug, Clone)]
struct Radix2Plan {
    len: usize,
    twiddles: Vec<Complex64>,
}

/// A planned forward/inverse transform of one length. Unnormalized; scaling is
/// the caller's business.
#[derive(Debug, Clone)]
pub struct Fft1d {
    len: usize,
    kind: Kind,
}

fn radix2_twiddles(n: usize) -> Vec<Complex64> {
    (0..n / 2)
        .map(|k| Complex64::from_polar(1.0, -2.0 * PI * k as f64 / n as f64))
        .collect()
}

fn radix2_in_place(buf: &mut [Complex64], twiddles: &[Complex64], inverse: bool) {
    let n = buf.len();
    if n <= 1 {
        return;
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            buf.swap(i, j);
        }
    }
    let mut size = 2;
    while size <= n {
        let half = size / 2;
        let stride = n / size;
        for start in (0..n).step_by(size) {
            for k in 0..half {
                let mut w = twiddles[k * stride];
                if inverse {
                    w = w.conj();
                }
                let a = buf[start + k];
                let b = buf[start + k + half] * w;
                buf[start + k] = a + b;
                buf[start + k + half] = a - b;
            }
        }
        size *= 2;
    }
}

impl Fft1d {
    pub fn new(len: usize) -> Self {
        assert!(len > 0, "zero-length transform");
        let kind = if len.is_power_of_two() {
            Kind::Radix2 {
                twiddles: radix2_twiddles(len),
            }
        } else {
            let m = (2 * len - 1).next_power_of_two();
            // k² mod 2n keeps the chirp argument small for large k.
            let chirp: Vec<Complex64> = (0..len)
                .map(|k| {
                    let k2 = (k as u128 * k as u128 % (2 * len as u128)) as f64;
                    Complex64::from_polar(1.0, -PI * k2 / len as f64)
                })
                .collect();
            let inner = Radix2Plan {
                len: m,
                twiddles: radix2_twiddles(m),
            };
            let mut kernel = vec![Complex64::new(0.0, 0.0); m];
            kernel[0] = chirp[0].conj();
            for k in 1..len {
                kernel[k] = chirp[k].conj();
                kernel[m - k] = chirp[k].conj();
            }
            radix2_in_place(&mut kernel, &inner.twiddles, false);
            Kind::Bluestein(Bluestein {
                chirp,
                kernel_hat: kernel,
                inner,
            })
        };
        Self { len, kind }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// `X_k = Σ x_n e^{∓2πikn/N}` (minus for forward), in place.
    pub fn process(&self, buf: &mut [Complex64], inverse: bool) {
        assert_eq!(buf.len(), self.len);
        match &self.kind {
            Kind::Radix2 { twiddles } => radix2_in_place(buf, twiddles, inverse),
            Kind::Bluestein(b) => {
                let n = self.len;
                let m = b.inner.len;
                // Inverse = conj(forward(conj(x))).
                let mut work = vec![Complex64::new(0.0, 0.0); m];
                for k in 0..n {
                    let x = if inverse { buf[k].conj() } else { buf[k] };
                    work[k] = x * b.chirp[k];
                }
                radix2_in_place(&mut work, &b.inner.twiddles, false);
                for (w, k) in work.iter_mut().zip(&b.kernel_hat) {
                    *w *= k;
                }
                radix2_in_place(&mut work, &b.inner.twiddles, true);
                let scale = 1.0 / m as f64;
                for k in 0..n {
                    let y = work[k] * scale * b.chirp[k];
                    buf[k] = if inverse { y.conj() } else { y };
                }
            }
        }
    }
}

/// Planned 2-D transform over an `height × width` row-major grid.
#[derive(Debug, Clone)]
pub struct Fft2d {
    height: usize,
    width: usize,
    rows: Fft1d,
    cols: Fft1d,
}

impl Fft2d {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            rows: Fft1d::new(width),
            cols: Fft1d::new(height),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Unnormalized 2-D transform in place.
    pub fn process(&self, grid: &mut [Complex64], inverse: bool) {
        let (h, w) = (self.height, self.width);
        assert_eq!(grid.len(), h * w);
        for row in grid.chunks_exact_mut(w) {
            self.rows.process(row, inverse);
        }
        let mut col = vec![Complex64::new(0.0, 0.0); h];
        for x in 0..w {
            for y in 0..h {
                col[y] = grid[y * w + x];
            }
            self.cols.process(&mut col, inverse);
            for y in 0..h {
                grid[y * w + x] = col[y];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn naive(x: &[Complex64], inverse: bool) -> Vec<Complex64> {
        let n = x.len();
        let sign = if inverse { 1.0 } else { -1.0 };
        (0..n)
            .map(|k| {
                x.iter()
                    .enumerate()
                    .map(|(j, &v)| {
                        v * Complex64::from_polar(1.0, sign * 2.0 * PI * (j * k % n) as f64 / n as f64)
                    })
                    .sum()
            })
            .collect()
    }

    #[test]
    fn matches_naive_dft_for_many_lengths() {
        let mut rng = SeededRng::new(5);
        for n in [1usize, 2, 3, 5, 7, 8, 12, 16, 36, 100, 127] {
            let x: Vec<Complex64> = (0..n)
                .map(|_| Complex64::new(rng.normal(), rng.normal()))
                .collect();
            for inverse in [false, true] {
                let expect = naive(&x, inverse);
                let mut got = x.clone();
                Fft1d::new(n).process(&mut got, inverse);
                for (a, b) in got.iter().zip(&expect) {
                    assert!((a - b).norm() < 1e-9 * (n as f64), "n={n}");
                }
            }
        }
    }
}
