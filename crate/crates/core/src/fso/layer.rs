use num_complex::Complex64;

use super::fft::Fft2Plan;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Spectral linear layer over truncated low-frequency modes.
///
/// The input spectrum is taken on the input grid and the product is written
/// into the low-frequency corner of a (possibly larger) output grid, so the
/// layer also upsamples. The inverse transform is scaled by `1 / (H_in W_in)`:
/// a kept-mode sinusoid comes out with its complex amplitude multiplied by
/// the weight, independent of the output resolution.
///
/// Weights are `(modes_h, modes_w, in_ch, out_ch)` row-major. Kept rows are
/// `0..ceil(modes_h/2)` plus the last `floor(modes_h/2)` rows (negative
/// frequencies); kept columns are the first `modes_w` real-FFT columns.
#[derive(Clone, Debug)]
pub struct FsoLayer {
    pub in_ch: usize,
    pub out_ch: usize,
    pub modes_h: usize,
    pub modes_w: usize,
    pub spatial_in: (usize, usize),
    pub spatial_out: (usize, usize),
    pub use_imaginary: bool,
    plan_in: Fft2Plan,
    plan_out: Fft2Plan,
}

/// Forward result plus the kept input modes needed by the backward pass.
#[derive(Clone, Debug)]
pub struct FsoCache {
    /// `(in_ch, modes_h * modes_w)` kept input spectrum.
    modes: Vec<Complex64>,
}

#[derive(Clone, Debug)]
pub struct FsoGrads {
    pub input: Tensor,
    pub real: Vec<f64>,
    pub imag: Option<Vec<f64>>,
}

impl FsoLayer {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        modes_h: usize,
        modes_w: usize,
        spatial_in: (usize, usize),
        spatial_out: (usize, usize),
        use_imaginary: bool,
    ) -> Result<Self> {
        let (hin, win) = spatial_in;
        let (hout, wout) = spatial_out;
        if in_ch == 0 || out_ch == 0 || hin == 0 || win == 0 {
            return Err(Error::Shape("fso layer dimensions must be positive".into()));
        }
        if hout < hin || wout < win {
            return Err(Error::Shape(format!(
                "fso output grid {hout}x{wout} smaller than input {hin}x{win}"
            )));
        }
        if modes_h == 0 || modes_w == 0 || modes_h > hin || modes_w > win / 2 + 1 {
            return Err(Error::Shape(format!(
                "{modes_h}x{modes_w} modes do not fit the {hin}x{} spectrum",
                win / 2 + 1
            )));
        }
        Ok(Self {
            in_ch,
            out_ch,
            modes_h,
            modes_w,
            spatial_in,
            spatial_out,
            use_imaginary,
            plan_in: Fft2Plan::new(hin, win),
            plan_out: Fft2Plan::new(hout, wout),
        })
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.modes_h, self.modes_w, self.in_ch, self.out_ch]
    }

    pub fn weight_len(&self) -> usize {
        self.modes_h * self.modes_w * self.in_ch * self.out_ch
    }

    pub fn param_count(&self) -> usize {
        self.weight_len() * if self.use_imaginary { 2 } else { 1 }
    }

    fn kept_row(&self, k: usize, grid_h: usize) -> usize {
        let pos = self.modes_h.div_ceil(2);
        if k < pos {
            k
        } else {
            grid_h - (self.modes_h - k)
        }
    }

    /// Flat offsets of the kept modes in the input and output half spectra.
    fn mode_offsets(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let whi = self.plan_in.half_width();
        let who = self.plan_out.half_width();
        let (hin, hout) = (self.spatial_in.0, self.spatial_out.0);
        (0..self.modes_h).flat_map(move |kh| {
            let ri = self.kept_row(kh, hin);
            let ro = self.kept_row(kh, hout);
            (0..self.modes_w).map(move |kw| (kh * self.modes_w + kw, ri * whi + kw, ro * who + kw))
        })
    }

    fn check_weights(&self, real: &[f64], imag: Option<&[f64]>) -> Result<()> {
        let n = self.weight_len();
        if real.len() != n {
            return Err(Error::Shape(format!("fso real weights: {} values, expected {n}", real.len())));
        }
        match (self.use_imaginary, imag) {
            (true, Some(im)) if im.len() == n => Ok(()),
            (true, Some(im)) => {
                Err(Error::Shape(format!("fso imaginary weights: {} values, expected {n}", im.len())))
            }
            (true, None) => Err(Error::Shape("fso layer expects imaginary weights".into())),
            (false, None) => Ok(()),
            (false, Some(_)) => Err(Error::Shape("fso layer has no imaginary part".into())),
        }
    }

    /// Applies the layer with already-masked effective weights.
    pub fn forward(&self, x: &Tensor, real: &[f64], imag: Option<&[f64]>) -> Result<(Tensor, FsoCache)> {
        let (c, h, w) = x.chw()?;
        if c != self.in_ch || (h, w) != self.spatial_in {
            return Err(Error::Shape(format!(
                "fso input {:?}, expected ({}, {}, {})",
                x.shape(),
                self.in_ch,
                self.spatial_in.0,
                self.spatial_in.1
            )));
        }
        self.check_weights(real, imag)?;
        let n_modes = self.modes_h * self.modes_w;
        let plane_in = h * w;

        let mut modes = vec![Complex64::new(0.0, 0.0); self.in_ch * n_modes];
        for i in 0..self.in_ch {
            let spec = self.plan_in.rfft2(&x.data()[i * plane_in..(i + 1) * plane_in]);
            for (m, off_in, _) in self.mode_offsets() {
                modes[i * n_modes + m] = spec[off_in];
            }
        }

        let (hout, wout) = self.spatial_out;
        let half_out = hout * self.plan_out.half_width();
        // irfft2 on the output grid divides by H_out W_out; rescale to 1/(H_in W_in)
        let rescale = (hout * wout) as f64 / plane_in as f64;
        let mut out = Tensor::zeros(&[self.out_ch, hout, wout]);
        let mut spec_out = vec![Complex64::new(0.0, 0.0); half_out];
        for o in 0..self.out_ch {
            spec_out.iter_mut().for_each(|z| *z = Complex64::new(0.0, 0.0));
            for (m, _, off_out) in self.mode_offsets() {
                let mut acc = Complex64::new(0.0, 0.0);
                for i in 0..self.in_ch {
                    let idx = (m * self.in_ch + i) * self.out_ch + o;
                    let weight = Complex64::new(real[idx], imag.map_or(0.0, |im| im[idx]));
                    acc += modes[i * n_modes + m] * weight;
                }
                spec_out[off_out] = acc;
            }
            let plane = self.plan_out.irfft2(&spec_out);
            let dst = &mut out.data_mut()[o * hout * wout..(o + 1) * hout * wout];
            for (d, v) in dst.iter_mut().zip(plane) {
                *d = v * rescale;
            }
        }
        Ok((out, FsoCache { modes }))
    }

    pub fn backward(
        &self,
        cache: &FsoCache,
        grad_out: &Tensor,
        real: &[f64],
        imag: Option<&[f64]>,
    ) -> Result<FsoGrads> {
        let (hout, wout) = self.spatial_out;
        if grad_out.shape() != [self.out_ch, hout, wout] {
            return Err(Error::Shape(format!("fso output gradient {:?}", grad_out.shape())));
        }
        self.check_weights(real, imag)?;
        let n_modes = self.modes_h * self.modes_w;
        let (hin, win) = self.spatial_in;
        let plane_in = hin * win;
        let plane_out = hout * wout;

        // dL/dY at each kept output mode: the adjoint of the real-part synthesis
        let mut grad_modes = vec![Complex64::new(0.0, 0.0); self.out_ch * n_modes];
        for o in 0..self.out_ch {
            let g = self.plan_out.rfft2(&grad_out.data()[o * plane_out..(o + 1) * plane_out]);
            for (m, _, off_out) in self.mode_offsets() {
                let kw = m % self.modes_w;
                grad_modes[o * n_modes + m] = g[off_out] * (self.plan_out.column_weight(kw) / plane_in as f64);
            }
        }

        let n = self.weight_len();
        let mut grad_real = vec![0.0; n];
        let mut grad_imag = if self.use_imaginary { Some(vec![0.0; n]) } else { None };
        let mut grad_in_modes = vec![Complex64::new(0.0, 0.0); self.in_ch * n_modes];
        for m in 0..n_modes {
            for i in 0..self.in_ch {
                let x = cache.modes[i * n_modes + m];
                let mut gx = Complex64::new(0.0, 0.0);
                for o in 0..self.out_ch {
                    let idx = (m * self.in_ch + i) * self.out_ch + o;
                    let gy = grad_modes[o * n_modes + m];
                    let prod = gy.conj() * x;
                    grad_real[idx] = prod.re;
                    if let Some(gi) = grad_imag.as_mut() {
                        gi[idx] = -prod.im;
                    }
                    let weight = Complex64::new(real[idx], imag.map_or(0.0, |im| im[idx]));
                    gx += gy * weight.conj();
                }
                grad_in_modes[i * n_modes + m] = gx;
            }
        }

        // dL/dx[n] = Re(sum_k gX[k] e^{+i theta_k n}) = N_in * irfft2(gX / multiplicity)
        let half_in = hin * self.plan_in.half_width();
        let mut input = Tensor::zeros(&[self.in_ch, hin, win]);
        let mut spec = vec![Complex64::new(0.0, 0.0); half_in];
        for i in 0..self.in_ch {
            spec.iter_mut().for_each(|z| *z = Complex64::new(0.0, 0.0));
            for (m, off_in, _) in self.mode_offsets() {
                let kw = m % self.modes_w;
                spec[off_in] = grad_in_modes[i * n_modes + m] / self.plan_in.column_weight(kw);
            }
            let plane = self.plan_in.irfft2(&spec);
            let dst = &mut input.data_mut()[i * plane_in..(i + 1) * plane_in];
            for (d, v) in dst.iter_mut().zip(plane) {
                *d = v * plane_in as f64;
            }
        }
        Ok(FsoGrads { input, real: grad_real, imag: grad_imag })
    }
}

/// Applies `layer` with weights gated by binary masks.
pub fn fso_forward(
    x: &Tensor,
    layer: &FsoLayer,
    real: &[f64],
    imag: Option<&[f64]>,
    mask_real: &[bool],
    mask_imag: Option<&[bool]>,
) -> Result<Tensor> {
    let gate = |w: &[f64], m: &[bool], what: &str| -> Result<Vec<f64>> {
        if w.len() != m.len() {
            return Err(Error::Shape(format!("fso {what} mask: {} bits for {} weights", m.len(), w.len())));
        }
        Ok(w.iter().zip(m).map(|(&v, &b)| if b { v } else { 0.0 }).collect())
    };
    let re = gate(real, mask_real, "real")?;
    let im = match (imag, mask_imag) {
        (Some(w), Some(m)) => Some(gate(w, m, "imaginary")?),
        (None, None) => None,
        _ => return Err(Error::Shape("imaginary weights and mask must come together".into())),
    };
    Ok(layer.forward(x, &re, im.as_deref())?.0)
}
