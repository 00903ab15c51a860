//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vidnir_core::config::Activation;
use vidnir_core::fso::FsoLayer;
use vidnir_core::metrics::{evaluate_matrix, MetricKind, MetricsReport};
use vidnir_core::subnet::{select_topc, BitMask};
use vidnir_core::training::{loss, train_session, SessionOutcome};
use vidnir_core::{synth_video, FsoPlacement, Model, ModelConfig, SynthKind, Tensor, TrainConfig, VideoSession};

/// Stem 8 -> 8 -> 8*2*2, one r=2 block of 4 channels with a 2x2-mode spectral branch.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        embed_base: 1.25,
        embed_levels: 2,
        max_sessions: 4,
        stem_dims: vec![8, 8, 8 * 2 * 2],
        stem_bias: false,
        base_spatial: (2, 2),
        upscale_factors: vec![2],
        block_channels: vec![4],
        min_channel_width: 4,
        fso: vec![FsoPlacement::new(0, 2, 2)],
        capacity: 0.5,
        head_channels: 3,
        activation: Activation::Gelu,
        output_squash: true,
    }
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Spectral layer by direct summation over the kept signed frequencies:
/// `y[o,p,q] = 1/(Hi Wi) sum_{k1,k2} c(k2) Re(Y[o,k1,k2] e^{2 pi i (k1 p/Ho + k2 q/Wo)})`
/// with `Y[o] = sum_i X[i] W[i,o]`, `X` the plain DFT of the input and
/// `c(k2) = 1` on the DC and Nyquist columns of the output grid, 2 elsewhere.
pub fn fso_oracle(
    x: &Tensor,
    out_ch: usize,
    modes: (usize, usize),
    out_hw: (usize, usize),
    re: &[f64],
    im: Option<&[f64]>,
) -> Tensor {
    let (cin, hi, wi) = x.chw().unwrap();
    let (mh, mw) = modes;
    let (ho, wo) = out_hw;
    let pos = mh.div_ceil(2);
    let freq = |kh: usize| if kh < pos { kh as f64 } else { kh as f64 - mh as f64 };
    let mut y = Tensor::zeros(&[out_ch, ho, wo]);
    for kh in 0..mh {
        let k1 = freq(kh);
        for kw in 0..mw {
            let k2 = kw as f64;
            // input DFT at (k1, k2)
            let spec: Vec<(f64, f64)> = (0..cin)
                .map(|i| {
                    let (mut sr, mut si) = (0.0, 0.0);
                    for n in 0..hi {
                        for m in 0..wi {
                            let ang = -2.0 * PI * (k1 * n as f64 / hi as f64 + k2 * m as f64 / wi as f64);
                            let v = x.data()[(i * hi + n) * wi + m];
                            sr += v * ang.cos();
                            si += v * ang.sin();
                        }
                    }
                    (sr, si)
                })
                .collect();
            let c = if kw == 0 || (wo % 2 == 0 && kw == wo / 2) { 1.0 } else { 2.0 };
            for o in 0..out_ch {
                let (mut yr, mut yi) = (0.0, 0.0);
                for (i, &(xr, xi)) in spec.iter().enumerate() {
                    let idx = ((kh * mw + kw) * cin + i) * out_ch + o;
                    let (wr, wim) = (re[idx], im.map_or(0.0, |v| v[idx]));
                    yr += xr * wr - xi * wim;
                    yi += xr * wim + xi * wr;
                }
                for p in 0..ho {
                    for q in 0..wo {
                        let ang = 2.0 * PI * (k1 * p as f64 / ho as f64 + k2 * q as f64 / wo as f64);
                        y.data_mut()[(o * ho + p) * wo + q] +=
                            c * (yr * ang.cos() - yi * ang.sin()) / (hi * wi) as f64;
                    }
                }
            }
        }
    }
    y
}

/// Largest `|a - b| / max|b|` over two tensors.
pub fn max_rel_err(a: &Tensor, b: &Tensor) -> f64 {
    let scale = b.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

/// A random spectral-layer case within `2 x 8 x 8` inputs and `4 x 4` modes.
pub struct FsoCase {
    pub layer: FsoLayer,
    pub x: Tensor,
    pub re: Vec<f64>,
    pub im: Option<Vec<f64>>,
}

pub fn random_fso_case(rng: &mut ChaCha8Rng) -> FsoCase {
    let cin = rng.gen_range(1..=2);
    let cout = rng.gen_range(1..=2);
    let hi = rng.gen_range(2..=8);
    let wi = rng.gen_range(2..=8);
    let up = rng.gen_range(1..=2);
    let mh = rng.gen_range(1..=hi.min(4));
    let mw = rng.gen_range(1..=(wi / 2 + 1).min(4));
    let use_imag = rng.gen_bool(0.7);
    let layer = FsoLayer::new(cin, cout, mh, mw, (hi, wi), (hi * up, wi * up), use_imag).unwrap();
    let n = layer.weight_len();
    let x = Tensor::from_vec(&[cin, hi, wi], random_vec(rng, cin * hi * wi)).unwrap();
    let re = random_vec(rng, n);
    let im = use_imag.then(|| random_vec(rng, n));
    FsoCase { layer, x, re, im }
}

/// Random top-c masks for every trunk tensor of `model`.
pub fn random_masks(model: &Model, rng: &mut ChaCha8Rng) -> Vec<BitMask> {
    let caps = model.layout().capacities(model.config().capacity);
    model
        .layout()
        .sizes()
        .iter()
        .zip(caps)
        .map(|(&n, c)| select_topc(&random_vec(rng, n), c).unwrap())
        .collect()
}

pub struct GradCheck {
    pub checked: usize,
    pub passed: usize,
    pub worst: f64,
    /// Masked-out coordinates whose analytic gradient was not exactly zero.
    pub masked_nonzero: usize,
}

/// Compares analytic gradients of the training loss with central differences
/// (step 1e-5) for every trunk and head coordinate of the tiny model.
pub fn tiny_gradient_check(seed: u64, tol: f64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::new(tiny_config(), seed).unwrap();
    let masks = random_masks(&model, &mut rng);
    let head = model.new_head(seed + 100);
    let [c, h, w] = model.output_shape();
    let target = Tensor::from_vec(&[c, h, w], (0..c * h * w).map(|_| rng.gen()).collect()).unwrap();
    let emb = model.embedding(0, 1, 3).unwrap();
    let alpha = 0.7;
    let objective = |trunk: &[Vec<f64>], head: &vidnir_core::model::Head| -> f64 {
        let eff: Vec<Vec<f64>> = trunk.iter().zip(&masks).map(|(t, m)| m.apply(t)).collect();
        let (out, _) = model.forward_with(&emb, &eff, head).unwrap();
        loss(&out, &target, alpha).unwrap().0
    };

    let eff = model.params.effective(&masks).unwrap();
    let (out, cache) = model.forward_with(&emb, &eff, &head).unwrap();
    let (_, g) = loss(&out, &target, alpha).unwrap();
    let grads = model.backward(&cache, &eff, &head, &g).unwrap();

    let step = 1e-5;
    let mut res = GradCheck { checked: 0, passed: 0, worst: 0.0, masked_nonzero: 0 };
    let mut record = |analytic: f64, numeric: f64| {
        let scale = analytic.abs().max(numeric.abs());
        let rel = if scale == 0.0 { 0.0 } else { (analytic - numeric).abs() / scale };
        res.checked += 1;
        if rel < tol {
            res.passed += 1;
        }
        res.worst = res.worst.max(rel);
    };
    let trunk = model.params.trunk.clone();
    for t in 0..trunk.len() {
        for k in 0..trunk[t].len() {
            // d L / d theta = m * d L / d (theta * m)
            let analytic = if masks[t].get(k) { grads.trunk[t][k] } else { 0.0 };
            let mut p = trunk.clone();
            p[t][k] += step;
            let mut m = trunk.clone();
            m[t][k] -= step;
            let numeric = (objective(&p, &head) - objective(&m, &head)) / (2.0 * step);
            if !masks[t].get(k) && numeric != 0.0 {
                res.masked_nonzero += 1;
            }
            record(analytic, numeric);
        }
    }
    for part in 0..2 {
        let len = if part == 0 { head.weight.len() } else { head.bias.len() };
        for k in 0..len {
            let bump = |d: f64| {
                let mut hd = head.clone();
                if part == 0 {
                    hd.weight[k] += d;
                } else {
                    hd.bias[k] += d;
                }
                objective(&trunk, &hd)
            };
            let analytic = if part == 0 { grads.head.weight[k] } else { grads.head.bias[k] };
            record(analytic, (bump(step) - bump(-step)) / (2.0 * step));
        }
    }
    res
}

/// The three synthetic 4-frame 16x16 sessions used by the desk benchmark.
pub fn benchmark_videos(seed: u64) -> Vec<VideoSession> {
    SynthKind::ALL
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let mut v = synth_video(k, 4, 16, 16, seed + i as u64).unwrap();
            v.session_index = i;
            v
        })
        .collect()
}

pub struct BenchRun {
    pub model: Model,
    /// Model snapshot after each session.
    pub stages: Vec<Model>,
    /// Frames of session `s` decoded right after session `s` finished.
    pub end_of_session: Vec<Vec<Tensor>>,
    pub outcomes: Vec<SessionOutcome>,
    pub videos: Vec<VideoSession>,
}

impl BenchRun {
    pub fn report(&self, kind: MetricKind) -> MetricsReport {
        let stages: Vec<&Model> = self.stages.iter().collect();
        evaluate_matrix(&stages, &self.videos, kind).unwrap()
    }

    pub fn avg_final_psnr(&self) -> f64 {
        self.report(MetricKind::Psnr).avg_final
    }
}

/// Trains the three benchmark sessions in order.
pub fn run_benchmark(config: &ModelConfig, seed: u64) -> BenchRun {
    let train = TrainConfig { seed, ..TrainConfig::desk() };
    let videos = benchmark_videos(seed);
    let mut model = Model::new(config.clone(), seed).unwrap();
    let mut stages = Vec::new();
    let mut end_of_session = Vec::new();
    let mut outcomes = Vec::new();
    for (s, v) in videos.iter().enumerate() {
        outcomes.push(train_session(&mut model, v, &train, |_| Ok(())).unwrap());
        end_of_session.push((0..v.len()).map(|t| model.decode_frame(s, t, v.len()).unwrap()).collect());
        stages.push(model.clone());
    }
    BenchRun { model, stages, end_of_session, outcomes, videos }
}
