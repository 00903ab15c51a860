//! Forward and backward kernels for the fixed operator set of the decoder.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `y = W x + b` with `W` stored `(out, in)` row-major.
pub fn linear(x: &[f64], weight: &[f64], bias: Option<&[f64]>, out: usize) -> Vec<f64> {
    let inp = x.len();
    debug_assert_eq!(weight.len(), out * inp);
    (0..out)
        .map(|o| {
            let row = &weight[o * inp..(o + 1) * inp];
            let acc: f64 = row.iter().zip(x).map(|(w, v)| w * v).sum();
            acc + bias.map_or(0.0, |b| b[o])
        })
        .collect()
}

/// Returns `(dL/dx, dL/dW)`; the bias gradient is `grad` itself.
pub fn linear_backward(x: &[f64], weight: &[f64], grad: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let inp = x.len();
    let mut gx = vec![0.0; inp];
    let mut gw = vec![0.0; weight.len()];
    for (o, &g) in grad.iter().enumerate() {
        let row = &weight[o * inp..(o + 1) * inp];
        let grow = &mut gw[o * inp..(o + 1) * inp];
        for k in 0..inp {
            gx[k] += row[k] * g;
            grow[k] = x[k] * g;
        }
    }
    (gx, gw)
}

/// 3x3 convolution, stride 1, zero padding 1. Weight is `(out, in, 3, 3)`.
pub fn conv3x3(x: &Tensor, weight: &[f64], bias: &[f64]) -> Result<Tensor> {
    let (cin, h, w) = x.chw()?;
    let cout = bias.len();
    if weight.len() != cout * cin * 9 {
        return Err(Error::Shape(format!(
            "conv weight has {} values, expected {cout}x{cin}x3x3",
            weight.len()
        )));
    }
    let mut out = Tensor::zeros(&[cout, h, w]);
    let src = x.data();
    let dst = out.data_mut();
    for o in 0..cout {
        let plane = &mut dst[o * h * w..(o + 1) * h * w];
        plane.iter_mut().for_each(|v| *v = bias[o]);
        for i in 0..cin {
            let input = &src[i * h * w..(i + 1) * h * w];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wv = weight[((o * cin + i) * 3 + ky) * 3 + kx];
                    let (y0, y1) = valid_range(ky, h);
                    let (x0, x1) = valid_range(kx, w);
                    for y in y0..y1 {
                        let sy = y + ky - 1;
                        let orow = &mut plane[y * w + x0..y * w + x1];
                        let irow = &input[sy * w + x0 + kx - 1..sy * w + x1 + kx - 1];
                        for (ov, iv) in orow.iter_mut().zip(irow) {
                            *ov += wv * iv;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Output rows/cols for which tap `k` (0..3) reads inside the input.
fn valid_range(k: usize, n: usize) -> (usize, usize) {
    let lo = 1usize.saturating_sub(k);
    let hi = (n + 1 - k).min(n);
    (lo, hi.max(lo))
}

pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn conv3x3_backward(x: &Tensor, weight: &[f64], grad: &Tensor) -> Result<ConvGrads> {
    let (cin, h, w) = x.chw()?;
    let (cout, gh, gw) = grad.chw()?;
    if (gh, gw) != (h, w) || weight.len() != cout * cin * 9 {
        return Err(Error::Shape("conv backward shapes disagree".into()));
    }
    let mut gin = Tensor::zeros(&[cin, h, w]);
    let mut gwt = vec![0.0; weight.len()];
    let mut gb = vec![0.0; cout];
    let src = x.data();
    let g = grad.data();
    let gi = gin.data_mut();
    for o in 0..cout {
        let gplane = &g[o * h * w..(o + 1) * h * w];
        gb[o] = gplane.iter().sum();
        for i in 0..cin {
            let input = &src[i * h * w..(i + 1) * h * w];
            let ginput = &mut gi[i * h * w..(i + 1) * h * w];
            for ky in 0..3 {
                for kx in 0..3 {
                    let widx = ((o * cin + i) * 3 + ky) * 3 + kx;
                    let wv = weight[widx];
                    let (y0, y1) = valid_range(ky, h);
                    let (x0, x1) = valid_range(kx, w);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = y + ky - 1;
                        let grow = &gplane[y * w + x0..y * w + x1];
                        let span = sy * w + x0 + kx - 1..sy * w + x1 + kx - 1;
                        for (gv, iv) in grow.iter().zip(&input[span.clone()]) {
                            acc += gv * iv;
                        }
                        for (gv, giv) in grow.iter().zip(&mut ginput[span]) {
                            *giv += wv * gv;
                        }
                    }
                    gwt[widx] = acc;
                }
            }
        }
    }
    Ok(ConvGrads { input: gin, weight: gwt, bias: gb })
}

/// `(C r^2, H, W) -> (C, rH, rW)` with `out[c, r i + a, r j + b] = x[c r^2 + a r + b, i, j]`.
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (cr2, h, w) = x.chw()?;
    if r == 0 || cr2 % (r * r) != 0 {
        return Err(Error::Shape(format!("{cr2} channels not divisible by {r}^2")));
    }
    let c = cr2 / (r * r);
    let (oh, ow) = (h * r, w * r);
    let mut out = Tensor::zeros(&[c, oh, ow]);
    let src = x.data();
    let dst = out.data_mut();
    for ch in 0..c {
        for a in 0..r {
            for b in 0..r {
                let plane = &src[((ch * r + a) * r + b) * h * w..][..h * w];
                for i in 0..h {
                    for j in 0..w {
                        dst[(ch * oh + r * i + a) * ow + r * j + b] = plane[i * w + j];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`pixel_shuffle`]; also its adjoint, so it maps output gradients back.
pub fn pixel_unshuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (c, oh, ow) = x.chw()?;
    if r == 0 || oh % r != 0 || ow % r != 0 {
        return Err(Error::Shape(format!("{oh}x{ow} not divisible by {r}")));
    }
    let (h, w) = (oh / r, ow / r);
    let mut out = Tensor::zeros(&[c * r * r, h, w]);
    let src = x.data();
    let dst = out.data_mut();
    for ch in 0..c {
        for a in 0..r {
            for b in 0..r {
                let plane = &mut dst[((ch * r + a) * r + b) * h * w..][..h * w];
                for i in 0..h {
                    for j in 0..w {
                        plane[i * w + j] = src[(ch * oh + r * i + a) * ow + r * j + b];
                    }
                }
            }
        }
    }
    Ok(out)
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU, `x * Phi(x)`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    cdf + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
