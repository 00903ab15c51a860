//! Reconstruction metrics and continual-learning aggregates.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::VideoSession;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

pub fn mse(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    pred.ensure_same_shape(truth, "mse")?;
    if pred.is_empty() {
        return Err(Error::Empty("mse of empty tensors".into()));
    }
    let sum: f64 = pred.data().iter().zip(truth.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / pred.len() as f64)
}

/// `10 log10(1 / MSE)` for unit peak; `+inf` when the frames are identical.
pub fn psnr(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    let m = mse(pred, truth)?;
    Ok(if m == 0.0 { f64::INFINITY } else { -10.0 * m.log10() })
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let center = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size).map(|i| (-((i as f64 - center).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = g.iter().sum();
    g.into_iter().map(|v| v / total).collect()
}

/// Separable valid-mode filter of an `h x w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..k).map(|j| g[j] * x[r * w + c + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..k).map(|i| g[i] * rows[(r + i) * ow + c]).sum();
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters an `oh x ow` map back onto `h x w`.
fn filter_valid_adjoint(y: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for r in 0..oh {
        for c in 0..ow {
            let v = y[r * ow + c];
            for i in 0..k {
                rows[(r + i) * ow + c] += g[i] * v;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..ow {
            let v = rows[r * ow + c];
            for j in 0..k {
                out[r * w + c + j] += g[j] * v;
            }
        }
    }
    out
}

struct PlaneStats {
    /// Mean SSIM over the valid map.
    ssim: f64,
    /// Mean contrast-structure term.
    cs: f64,
    /// d(mean SSIM)/d(pred plane), when requested.
    grad: Option<Vec<f64>>,
}

fn plane_ssim(a: &[f64], b: &[f64], h: usize, w: usize, g: &[f64], want_grad: bool) -> PlaneStats {
    let sq = |x: &[f64]| x.iter().map(|v| v * v).collect::<Vec<_>>();
    let prod: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let mu_a = filter_valid(a, h, w, g);
    let mu_b = filter_valid(b, h, w, g);
    let e_aa = filter_valid(&sq(a), h, w, g);
    let e_bb = filter_valid(&sq(b), h, w, g);
    let e_ab = filter_valid(&prod, h, w, g);
    let n = mu_a.len();
    let (mut ssim_sum, mut cs_sum) = (0.0, 0.0);
    let (mut d_mu, mut d_aa, mut d_ab) = if want_grad {
        (vec![0.0; n], vec![0.0; n], vec![0.0; n])
    } else {
        (Vec::new(), Vec::new(), Vec::new())
    };
    for p in 0..n {
        let (ma, mb) = (mu_a[p], mu_b[p]);
        let var_a = e_aa[p] - ma * ma;
        let var_b = e_bb[p] - mb * mb;
        let cov = e_ab[p] - ma * mb;
        let num_l = 2.0 * ma * mb + C1;
        let num_cs = 2.0 * cov + C2;
        let den_l = ma * ma + mb * mb + C1;
        let den_cs = var_a + var_b + C2;
        let den = den_l * den_cs;
        let s = num_l * num_cs / den;
        ssim_sum += s;
        cs_sum += num_cs / den_cs;
        if want_grad {
            // written without dividing by the numerators, which may vanish
            d_mu[p] = (2.0 * mb * num_cs - 2.0 * mb * num_l) / den - s * (2.0 * ma / den_l - 2.0 * ma / den_cs);
            d_aa[p] = -s / den_cs;
            d_ab[p] = 2.0 * num_l / den;
        }
    }
    let grad = want_grad.then(|| {
        let inv = 1.0 / n as f64;
        let t_mu = filter_valid_adjoint(&d_mu, h, w, g);
        let t_aa = filter_valid_adjoint(&d_aa, h, w, g);
        let t_ab = filter_valid_adjoint(&d_ab, h, w, g);
        (0..h * w).map(|q| inv * (t_mu[q] + 2.0 * a[q] * t_aa[q] + b[q] * t_ab[q])).collect()
    });
    PlaneStats { ssim: ssim_sum / n as f64, cs: cs_sum / n as f64, grad }
}

/// Window used for an `h x w` frame: 11, clipped to the smaller side.
pub fn clipped_window(h: usize, w: usize) -> usize {
    SSIM_WINDOW.min(h).min(w)
}

fn check_frames(pred: &Tensor, truth: &Tensor, window: usize) -> Result<(usize, usize, usize)> {
    pred.ensure_same_shape(truth, "ssim")?;
    let (c, h, w) = pred.chw()?;
    if window == 0 || h < window || w < window {
        return Err(Error::Shape(format!("{h}x{w} frame smaller than the {window}x{window} window")));
    }
    Ok((c, h, w))
}

/// Gaussian-window SSIM averaged over channels and window positions.
pub fn ssim(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    let (_, h, w) = pred.chw()?;
    ssim_with(pred, truth, clipped_window(h, w), SSIM_SIGMA)
}

pub fn ssim_with(pred: &Tensor, truth: &Tensor, window: usize, sigma: f64) -> Result<f64> {
    let (c, h, w) = check_frames(pred, truth, window)?;
    let g = gaussian_window(window, sigma);
    let plane = h * w;
    let total: f64 = (0..c)
        .map(|ch| {
            let r = ch * plane..(ch + 1) * plane;
            plane_ssim(&pred.data()[r.clone()], &truth.data()[r], h, w, &g, false).ssim
        })
        .sum();
    Ok(total / c as f64)
}

/// SSIM together with its gradient with respect to `pred`.
pub fn ssim_and_grad(pred: &Tensor, truth: &Tensor) -> Result<(f64, Tensor)> {
    let (_, h, w) = pred.chw()?;
    let window = clipped_window(h, w);
    let (c, h, w) = check_frames(pred, truth, window)?;
    let g = gaussian_window(window, SSIM_SIGMA);
    let plane = h * w;
    let mut grad = Tensor::zeros(&[c, h, w]);
    let mut total = 0.0;
    for ch in 0..c {
        let r = ch * plane..(ch + 1) * plane;
        let st = plane_ssim(&pred.data()[r.clone()], &truth.data()[r.clone()], h, w, &g, true);
        total += st.ssim;
        for (d, v) in grad.data_mut()[r].iter_mut().zip(st.grad.unwrap()) {
            *d = v / c as f64;
        }
    }
    Ok((total / c as f64, grad))
}

fn avg_pool2(x: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = 0.25
                * (x[2 * r * w + 2 * c] + x[2 * r * w + 2 * c + 1] + x[(2 * r + 1) * w + 2 * c] + x[(2 * r + 1) * w + 2 * c + 1]);
        }
    }
    (out, oh, ow)
}

/// Multi-scale SSIM with the standard five scale weights, truncated (and
/// renormalized) to the scales at which the frame still covers the window.
pub fn ms_ssim(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    let (_, h, w) = pred.chw()?;
    let window = clipped_window(h, w);
    let (c, h, w) = check_frames(pred, truth, window)?;
    let mut levels = 1;
    while levels < MS_SSIM_WEIGHTS.len() && (h >> levels) >= window && (w >> levels) >= window {
        levels += 1;
    }
    let weights = &MS_SSIM_WEIGHTS[..levels];
    let wsum: f64 = weights.iter().sum();
    let g = gaussian_window(window, SSIM_SIGMA);
    let plane = h * w;
    let mut total = 0.0;
    for ch in 0..c {
        let mut a = pred.data()[ch * plane..(ch + 1) * plane].to_vec();
        let mut b = truth.data()[ch * plane..(ch + 1) * plane].to_vec();
        let (mut ph, mut pw) = (h, w);
        let mut value = 1.0;
        for (j, wj) in weights.iter().enumerate() {
            let st = plane_ssim(&a, &b, ph, pw, &g, false);
            let term = if j + 1 == levels { st.ssim } else { st.cs };
            value *= term.max(0.0).powf(wj / wsum);
            if j + 1 < levels {
                let (na, nh, nw) = avg_pool2(&a, ph, pw);
                b = avg_pool2(&b, ph, pw).0;
                a = na;
                ph = nh;
                pw = nw;
            }
        }
        total += value;
    }
    Ok(total / c as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MetricKind {
    #[serde(rename = "psnr")]
    Psnr,
    #[serde(rename = "ms-ssim")]
    MsSsim,
}

impl MetricKind {
    pub fn frame_metric(self, pred: &Tensor, truth: &Tensor) -> Result<f64> {
        match self {
            MetricKind::Psnr => psnr(pred, truth),
            MetricKind::MsSsim => ms_ssim(pred, truth),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            MetricKind::Psnr => "PSNR",
            MetricKind::MsSsim => "MS-SSIM",
        }
    }
}

/// Transfer matrix `A[i][s]` (metric on session `s` after training through
/// session `i`, for `s <= i`) with its final average and backward transfer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub kind: MetricKind,
    /// Lower-triangular rows; row `i` has `i + 1` entries.
    #[serde(with = "inf_matrix")]
    pub matrix: Vec<Vec<f64>>,
    #[serde(with = "inf_float")]
    pub avg_final: f64,
    #[serde(with = "inf_float")]
    pub bwt: f64,
    /// False for a single session, where backward transfer has no terms.
    pub bwt_defined: bool,
}

impl MetricsReport {
    pub fn from_matrix(kind: MetricKind, matrix: Vec<Vec<f64>>) -> Result<Self> {
        let n = matrix.len();
        if n == 0 {
            return Err(Error::Empty("transfer matrix has no rows".into()));
        }
        for (i, row) in matrix.iter().enumerate() {
            if row.len() != i + 1 {
                return Err(Error::Shape(format!("transfer matrix row {i} has {} entries", row.len())));
            }
        }
        let last = &matrix[n - 1];
        let avg_final = last.iter().sum::<f64>() / n as f64;
        let (bwt, bwt_defined) = if n == 1 {
            (0.0, false)
        } else {
            let drops: f64 = (0..n - 1).map(|s| diff(last[s], matrix[s][s])).sum();
            (drops / (n - 1) as f64, true)
        };
        Ok(Self { kind, matrix, avg_final, bwt, bwt_defined })
    }

    pub fn to_table(&self) -> String {
        let n = self.matrix.len();
        let mut out = String::new();
        let _ = write!(out, "{:>8}", self.kind.label());
        for s in 0..n {
            let _ = write!(out, " {:>9}", format!("s{}", s + 1));
        }
        out.push('\n');
        for (i, row) in self.matrix.iter().enumerate() {
            let _ = write!(out, "{:>8}", format!("after {}", i + 1));
            for v in row {
                let _ = write!(out, " {:>9}", fmt_value(*v));
            }
            out.push('\n');
        }
        let _ = writeln!(out, "avg {} = {}", self.kind.label(), fmt_value(self.avg_final));
        let bwt = if self.bwt_defined { fmt_value(self.bwt) } else { format!("{} (single session)", fmt_value(self.bwt)) };
        let _ = writeln!(out, "BWT = {bwt}");
        out
    }
}

/// `a - b` with `inf - inf = 0` so identical perfect decodes show no forgetting.
fn diff(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        a - b
    }
}

fn fmt_value(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.4}")
    }
}

/// Mean per-frame metric of `model` decoding `video` as session `session`.
pub fn session_metric(model: &Model, session: usize, video: &VideoSession, kind: MetricKind) -> Result<f64> {
    let t = video.frames.len();
    let mut total = 0.0;
    for (i, frame) in video.frames.iter().enumerate() {
        let pred = model.decode_frame(session, i, t)?;
        total += kind.frame_metric(&pred, frame)?;
    }
    Ok(total / t as f64)
}

/// Fills the transfer matrix from one model snapshot per training stage.
///
/// `stages[i]` must hold sessions `0..=i`.
pub fn evaluate_matrix(stages: &[&Model], videos: &[VideoSession], kind: MetricKind) -> Result<MetricsReport> {
    if stages.len() > videos.len() {
        return Err(Error::UnknownSession { session: stages.len() - 1, available: videos.len() });
    }
    let mut matrix = Vec::with_capacity(stages.len());
    for (i, model) in stages.iter().enumerate() {
        if model.session_count() < i + 1 {
            return Err(Error::UnknownSession { session: i, available: model.session_count() });
        }
        let row = (0..=i).map(|s| session_metric(model, s, &videos[s], kind)).collect::<Result<Vec<_>>>()?;
        matrix.push(row);
    }
    MetricsReport::from_matrix(kind, matrix)
}

/// Serializes non-finite values as strings (`"inf"`, `"-inf"`, `"nan"`).
pub(crate) mod inf_float {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn to_value(v: f64) -> serde_json::Value {
        if v.is_finite() {
            serde_json::json!(v)
        } else if v.is_nan() {
            serde_json::json!("nan")
        } else if v > 0.0 {
            serde_json::json!("inf")
        } else {
            serde_json::json!("-inf")
        }
    }

    pub fn from_value(v: &serde_json::Value) -> Result<f64, String> {
        match v {
            serde_json::Value::Number(n) => n.as_f64().ok_or_else(|| "bad number".to_string()),
            serde_json::Value::String(s) => match s.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(format!("unexpected metric value `{other}`")),
            },
            other => Err(format!("unexpected metric value {other}")),
        }
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        serde::Serialize::serialize(&to_value(*v), s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        let v = serde_json::Value::deserialize(d)?;
        from_value(&v).map_err(serde::de::Error::custom)
    }
}

mod inf_matrix {
    use serde::{Deserialize, Deserializer, Serializer};

    use super::inf_float::{from_value, to_value};

    pub fn serialize<S: Serializer>(m: &[Vec<f64>], s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<serde_json::Value>> = m.iter().map(|r| r.iter().map(|&v| to_value(v)).collect()).collect();
        serde::Serialize::serialize(&rows, s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<f64>>, D::Error> {
        let rows = Vec::<Vec<serde_json::Value>>::deserialize(d)?;
        rows.iter()
            .map(|r| r.iter().map(from_value).collect::<Result<Vec<_>, _>>())
            .collect::<Result<_, _>>()
            .map_err(serde::de::Error::custom)
    }
}
