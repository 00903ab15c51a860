//! Session training: reconstruction loss, learning-rate schedule, Adam, and
//! the per-session loop that learns weights and mask scores together.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::VideoSession;
use crate::error::{Error, Result};
use crate::metrics::{psnr, ssim_and_grad};
use crate::model::{Head, Model};
use crate::subnet::{gate_weight_gradient, score_gradient_ste, BitMask, ScoreState};
use crate::tensor::Tensor;

/// `alpha * mean|pred - truth| + (1 - alpha) * (1 - ssim(pred, truth))` and its
/// gradient with respect to `pred`.
pub fn loss(pred: &Tensor, truth: &Tensor, alpha: f64) -> Result<(f64, Tensor)> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    pred.ensure_same_shape(truth, "loss")?;
    let n = pred.len() as f64;
    let mut l1 = 0.0;
    let mut grad = Tensor::zeros(pred.shape());
    for ((g, &p), &t) in grad.data_mut().iter_mut().zip(pred.data()).zip(truth.data()) {
        let d = p - t;
        l1 += d.abs();
        // subgradient 0 at an exact match
        let sign = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
        *g = alpha * sign / n;
    }
    let mut value = alpha * l1 / n;
    if alpha < 1.0 {
        let (s, sg) = ssim_and_grad(pred, truth)?;
        value += (1.0 - alpha) * (1.0 - s);
        for (g, v) in grad.data_mut().iter_mut().zip(sg.data()) {
            *g -= (1.0 - alpha) * v;
        }
    }
    Ok((value, grad))
}

/// Linear warmup from 0 to `lr`, then cosine decay to 0 at `total`.
pub fn lr_schedule(step: usize, total: usize, warmup: usize, lr: f64) -> f64 {
    if step < warmup {
        return lr * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return lr;
    }
    let progress = (step.min(total) - warmup) as f64 / (total - warmup) as f64;
    lr * 0.5 * (1.0 + (PI * progress).cos())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamParams {
    fn from(c: &TrainConfig) -> Self {
        Self { beta1: c.adam_beta1, beta2: c.adam_beta2, eps: c.adam_eps }
    }
}

/// Adam moments for a list of tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. A coordinate whose gradient has been zero
/// since the state was created is left bit-identical.
pub fn adam_step(
    params: &mut [Vec<f64>],
    grads: &[Vec<f64>],
    state: &mut OptimizerState,
    lr: f64,
    hp: AdamParams,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let c1 = 1.0 - hp.beta1.powi(state.step as i32);
    let c2 = 1.0 - hp.beta2.powi(state.step as i32);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        if p.len() != g.len() || p.len() != m.len() {
            return Err(Error::Shape(format!("adam: tensor of {} with gradient of {}", p.len(), g.len())));
        }
        for i in 0..p.len() {
            m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g[i];
            v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g[i] * g[i];
            p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + hp.eps);
        }
    }
    Ok(())
}

/// Independent per-session seed streams derived from the run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeedStream {
    Scores = 1,
    Head = 2,
}

pub fn derive_seed(base: u64, session: usize, stream: SeedStream) -> u64 {
    // splitmix64 finalizer
    let mut z = base
        .wrapping_add((session as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add((stream as u64).wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub session: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    #[serde(with = "crate::metrics::inf_float")]
    pub psnr: f64,
}

#[derive(Clone, Debug)]
pub struct SessionOutcome {
    pub session: usize,
    pub steps: usize,
    pub final_loss: f64,
    /// PSNR of each frame decoded with the frozen subnetwork.
    pub frame_psnr: Vec<f64>,
    /// Scores at the end of the session.
    pub scores: ScoreState,
}

impl SessionOutcome {
    pub fn mean_psnr(&self) -> f64 {
        self.frame_psnr.iter().sum::<f64>() / self.frame_psnr.len() as f64
    }
}

/// Trains the next session of a model step by step.
///
/// Every step re-derives the session mask from the current scores, trains on
/// the effective weights `theta * m`, and zeroes the update of any weight held
/// by an earlier session. [`SessionTrainer::finish`] freezes the mask and head.
pub struct SessionTrainer<'a> {
    model: &'a mut Model,
    session: usize,
    frames: Vec<Tensor>,
    embeddings: Vec<Vec<f64>>,
    capacities: Vec<f64>,
    frozen: Vec<BitMask>,
    scores: ScoreState,
    head: Head,
    opt_weights: OptimizerState,
    opt_scores: OptimizerState,
    opt_head: OptimizerState,
    alpha: f64,
    adam: AdamParams,
    step: usize,
    last_loss: f64,
}

impl<'a> SessionTrainer<'a> {
    pub fn new(model: &'a mut Model, video: &VideoSession, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if video.frames.is_empty() {
            return Err(Error::Empty("session has no frames".into()));
        }
        let session = model.session_count();
        if model.params.heads.len() != session {
            return Err(Error::Shape(format!("{} heads for {session} finished sessions", model.params.heads.len())));
        }
        let shape = model.output_shape();
        if video.frames[0].shape() != shape {
            return Err(Error::Shape(format!(
                "session frames are {:?}, the decoder produces {shape:?}",
                video.frames[0].shape()
            )));
        }
        let t = video.frames.len();
        let embeddings = (0..t).map(|i| model.embedding(session, i, t)).collect::<Result<Vec<_>>>()?;
        let layout = model.layout();
        let capacities = layout.capacities(model.config().capacity);
        let scores = ScoreState::init(&layout.score_shapes(), derive_seed(cfg.seed, session, SeedStream::Scores));
        let head = model.new_head(derive_seed(cfg.seed, session, SeedStream::Head));
        let sizes = layout.sizes();
        let frozen = model.masks.cumulative().to_vec();
        Ok(Self {
            session,
            frames: video.frames.clone(),
            embeddings,
            capacities,
            frozen,
            opt_weights: OptimizerState::new(&sizes),
            opt_scores: OptimizerState::new(&sizes),
            opt_head: OptimizerState::new(&[head.weight.len(), head.bias.len()]),
            scores,
            head,
            alpha: cfg.alpha,
            adam: cfg.into(),
            step: 0,
            last_loss: f64::NAN,
            model,
        })
    }

    pub fn session(&self) -> usize {
        self.session
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn scores(&self) -> &ScoreState {
        &self.scores
    }

    pub fn current_masks(&self) -> Result<Vec<BitMask>> {
        self.scores.masks(&self.capacities)
    }

    /// Loss of frame `frame` under the current weights, scores and head.
    pub fn frame_loss(&self, frame: usize) -> Result<f64> {
        let masks = self.current_masks()?;
        let weights = self.model.params.effective(&masks)?;
        let (out, _) = self.model.forward_with(&self.embeddings[frame], &weights, &self.head)?;
        Ok(loss(&out, &self.frames[frame], self.alpha)?.0)
    }

    /// One update on frame `frame` with learning rate `lr`; reports the
    /// pre-update loss.
    pub fn step_on(&mut self, frame: usize, lr: f64) -> Result<StepRecord> {
        let target = self
            .frames
            .get(frame)
            .ok_or_else(|| Error::Shape(format!("frame {frame} outside a {}-frame session", self.frames.len())))?;
        let masks = self.scores.masks(&self.capacities)?;
        let weights = self.model.params.effective(&masks)?;
        let (out, cache) = self.model.forward_with(&self.embeddings[frame], &weights, &self.head)?;
        let (value, grad_out) = loss(&out, target, self.alpha)?;
        if !value.is_finite() {
            return Err(Error::Diverged { step: self.step, loss: value });
        }
        let frame_psnr = psnr(&out, target)?;
        let grads = self.model.backward(&cache, &weights, &self.head, &grad_out)?;

        let mut weight_grads = Vec::with_capacity(grads.trunk.len());
        let mut score_grads = Vec::with_capacity(grads.trunk.len());
        for (i, g) in grads.trunk.iter().enumerate() {
            weight_grads.push(gate_weight_gradient(g, &masks[i], &self.frozen[i])?);
            score_grads.push(score_gradient_ste(g, &self.model.params.trunk[i])?);
        }
        adam_step(&mut self.model.params.trunk, &weight_grads, &mut self.opt_weights, lr, self.adam)?;
        adam_step(&mut self.scores.scores, &score_grads, &mut self.opt_scores, lr, self.adam)?;
        let mut head = [std::mem::take(&mut self.head.weight), std::mem::take(&mut self.head.bias)];
        let result = adam_step(&mut head, &[grads.head.weight, grads.head.bias], &mut self.opt_head, lr, self.adam);
        let [hw, hb] = head;
        self.head = Head { weight: hw, bias: hb };
        result?;

        let record = StepRecord { session: self.session, step: self.step, lr, loss: value, psnr: frame_psnr };
        self.step += 1;
        self.last_loss = value;
        Ok(record)
    }

    /// Runs the configured number of epochs, visiting frames in index order.
    pub fn run(&mut self, cfg: &TrainConfig, mut log: impl FnMut(&StepRecord) -> Result<()>) -> Result<()> {
        let t = self.frames.len();
        let total = cfg.epochs * t;
        let warmup = cfg.warmup_epochs * t;
        for k in 0..total {
            let record = self.step_on(k % t, lr_schedule(k, total, warmup, cfg.lr))?;
            log(&record)?;
        }
        Ok(())
    }

    /// Freezes the final mask and head, rounds the store to `f32`, and
    /// measures each frame through the frozen subnetwork.
    pub fn finish(self) -> Result<SessionOutcome> {
        let masks = self.scores.masks(&self.capacities)?;
        self.model.masks.push_session(masks)?;
        self.model.params.heads.push(self.head);
        self.model.params.round_to_f32();
        let t = self.frames.len();
        let frame_psnr = self
            .frames
            .iter()
            .enumerate()
            .map(|(i, f)| psnr(&self.model.decode_frame(self.session, i, t)?, f))
            .collect::<Result<Vec<_>>>()?;
        Ok(SessionOutcome {
            session: self.session,
            steps: self.step,
            final_loss: self.last_loss,
            frame_psnr,
            scores: self.scores,
        })
    }
}

/// Trains `video` as the model's next session.
pub fn train_session(
    model: &mut Model,
    video: &VideoSession,
    cfg: &TrainConfig,
    log: impl FnMut(&StepRecord) -> Result<()>,
) -> Result<SessionOutcome> {
    let mut trainer = SessionTrainer::new(model, video, cfg)?;
    trainer.run(cfg, log)?;
    trainer.finish()
}
