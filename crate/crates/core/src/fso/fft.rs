//! Complex FFT (iterative radix-2, Bluestein for other lengths) and the
//! 2-D real transforms built on it.
//!
//! Conventions: the forward transform is unnormalized,
//! `X[k] = sum_n x[n] exp(-2 pi i k n / N)`, and the inverse divides by the
//! element count. Real spectra are stored as `H x (W/2 + 1)` row-major grids.
//! These conventions are part of the checkpoint contract and must not change.

use std::f64::consts::PI;

use num_complex::Complex64;

/// Precomputed 1-D transform of a fixed length.
#[derive(Clone, Debug)]
pub struct FftPlan {
    len: usize,
    kind: PlanKind,
}

#[derive(Clone, Debug)]
enum PlanKind {
    Trivial,
    Radix2 { twiddles: Vec<Complex64> },
    Bluestein(Box<Bluestein>),
}

#[derive(Clone, Debug)]
struct Bluestein {
    /// `exp(-i pi n^2 / N)` for `n < N`.
    chirp: Vec<Complex64>,
    /// Forward transform of the conjugate chirp, zero-padded to `inner.len`.
    kernel_spectrum: Vec<Complex64>,
    inner: FftPlan,
}

impl FftPlan {
    pub fn new(len: usize) -> Self {
        assert!(len > 0, "fft length must be positive");
        let kind = if len == 1 {
            PlanKind::Trivial
        } else if len.is_power_of_two() {
            let twiddles = (0..len / 2)
                .map(|k| Complex64::from_polar(1.0, -2.0 * PI * k as f64 / len as f64))
                .collect();
            PlanKind::Radix2 { twiddles }
        } else {
            PlanKind::Bluestein(Box::new(Bluestein::new(len)))
        };
        Self { len, kind }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Unnormalized transform in place; `inverse` flips the exponent sign.
    pub fn process(&self, buf: &mut [Complex64], inverse: bool) {
        debug_assert_eq!(buf.len(), self.len);
        match &self.kind {
            PlanKind::Trivial => {}
            PlanKind::Radix2 { twiddles } => radix2(buf, twiddles, inverse),
            PlanKind::Bluestein(b) => {
                // inverse(x) = conj(forward(conj(x)))
                if inverse {
                    buf.iter_mut().for_each(|z| *z = z.conj());
                }
                b.forward(buf);
                if inverse {
                    buf.iter_mut().for_each(|z| *z = z.conj());
                }
            }
        }
    }
}

fn radix2(buf: &mut [Complex64], twiddles: &[Complex64], inverse: bool) {
    let n = buf.len();
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

impl Bluestein {
    fn new(len: usize) -> Self {
        let m = (2 * len - 1).next_power_of_two();
        let inner = FftPlan::new(m);
        // n^2 mod 2N keeps the chirp argument small for large n
        let chirp: Vec<Complex64> = (0..len)
            .map(|n| {
                let q = (n as u128 * n as u128 % (2 * len as u128)) as f64;
                Complex64::from_polar(1.0, -PI * q / len as f64)
            })
            .collect();
        let mut kernel = vec![Complex64::new(0.0, 0.0); m];
        kernel[0] = chirp[0].conj();
        for n in 1..len {
            kernel[n] = chirp[n].conj();
            kernel[m - n] = chirp[n].conj();
        }
        inner.process(&mut kernel, false);
        Self { chirp, kernel_spectrum: kernel, inner }
    }

    fn forward(&self, buf: &mut [Complex64]) {
        let m = self.inner.len;
        let mut work = vec![Complex64::new(0.0, 0.0); m];
        for (w, (x, c)) in work.iter_mut().zip(buf.iter().zip(&self.chirp)) {
            *w = x * c;
        }
        self.inner.process(&mut work, false);
        for (w, k) in work.iter_mut().zip(&self.kernel_spectrum) {
            *w *= k;
        }
        self.inner.process(&mut work, true);
        let scale = 1.0 / m as f64;
        for (x, (w, c)) in buf.iter_mut().zip(work.iter().zip(&self.chirp)) {
            *x = w * c * scale;
        }
    }
}

/// Paired row/column plans for real 2-D transforms of an `h x w` grid.
#[derive(Clone, Debug)]
pub struct Fft2Plan {
    h: usize,
    w: usize,
    rows: FftPlan,
    cols: FftPlan,
}

impl Fft2Plan {
    pub fn new(h: usize, w: usize) -> Self {
        Self { h, w, rows: FftPlan::new(w), cols: FftPlan::new(h) }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    /// Number of stored real-FFT columns, `w / 2 + 1`.
    pub fn half_width(&self) -> usize {
        self.w / 2 + 1
    }

    /// Multiplicity of a stored column in the Hermitian-extended spectrum:
    /// 1 for DC and (even-width) Nyquist, 2 otherwise.
    pub fn column_weight(&self, k2: usize) -> f64 {
        if k2 == 0 || (self.w.is_multiple_of(2) && k2 == self.w / 2) {
            1.0
        } else {
            2.0
        }
    }

    /// Unnormalized real-to-complex transform; returns `h x (w/2+1)`.
    pub fn rfft2(&self, x: &[f64]) -> Vec<Complex64> {
        let (h, w, wh) = (self.h, self.w, self.half_width());
        assert_eq!(x.len(), h * w, "rfft2 input size");
        let mut out = vec![Complex64::new(0.0, 0.0); h * wh];
        let mut row = vec![Complex64::new(0.0, 0.0); w];
        for r in 0..h {
            for (z, &v) in row.iter_mut().zip(&x[r * w..(r + 1) * w]) {
                *z = Complex64::new(v, 0.0);
            }
            self.rows.process(&mut row, false);
            out[r * wh..(r + 1) * wh].copy_from_slice(&row[..wh]);
        }
        self.columns(&mut out, false);
        out
    }

    /// Complex-to-real inverse of [`rfft2`](Self::rfft2), divided by `h * w`.
    ///
    /// Imaginary parts of the DC and Nyquist columns that break Hermitian
    /// symmetry are projected away, so the output is always real.
    pub fn irfft2(&self, spectrum: &[Complex64]) -> Vec<f64> {
        let (h, w, wh) = (self.h, self.w, self.half_width());
        assert_eq!(spectrum.len(), h * wh, "irfft2 input size");
        let mut grid = spectrum.to_vec();
        self.columns(&mut grid, true);
        let scale = 1.0 / (h * w) as f64;
        let mut out = vec![0.0; h * w];
        let mut row = vec![Complex64::new(0.0, 0.0); w];
        for r in 0..h {
            let half = &grid[r * wh..(r + 1) * wh];
            row[..wh].copy_from_slice(half);
            for k in wh..w {
                row[k] = half[w - k].conj();
            }
            self.rows.process(&mut row, true);
            for (o, z) in out[r * w..(r + 1) * w].iter_mut().zip(&row) {
                *o = z.re * scale;
            }
        }
        out
    }

    fn columns(&self, grid: &mut [Complex64], inverse: bool) {
        let (h, wh) = (self.h, self.half_width());
        let mut col = vec![Complex64::new(0.0, 0.0); h];
        for c in 0..wh {
            for r in 0..h {
                col[r] = grid[r * wh + c];
            }
            self.cols.process(&mut col, inverse);
            for r in 0..h {
                grid[r * wh + c] = col[r];
            }
        }
    }
}
