//! Index-to-frame decoder: positional encoding, masked stem MLP, upscaling
//! blocks with optional spectral branches, and per-session output heads.

mod encoding;
pub mod layers;
mod params;

pub use encoding::{normalize_indices, positional_encode};
pub use params::{count_parameters, total_parameters, BlockSlots, Head, LayerCount, Layout, ParameterStore, TensorRole, TensorSpec};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::fso::{FsoCache, FsoLayer};
use crate::subnet::{BitMask, SessionMaskSet};
use crate::tensor::Tensor;
use layers::{conv3x3, conv3x3_backward, gelu, gelu_grad, linear, linear_backward, pixel_shuffle, pixel_unshuffle, sigmoid};

/// Activations kept by [`Model::forward_with`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    stem_inputs: Vec<Vec<f64>>,
    stem_pre: Vec<Vec<f64>>,
    block_inputs: Vec<Tensor>,
    block_pre: Vec<Tensor>,
    fso: Vec<Option<FsoCache>>,
    trunk: Tensor,
    output: Tensor,
}

impl ForwardCache {
    pub fn output(&self) -> &Tensor {
        &self.output
    }
}

/// Gradients with respect to the effective (masked) trunk weights and the head.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub trunk: Vec<Vec<f64>>,
    pub head: Head,
}

/// Decoder parameters together with the frozen per-session masks.
///
/// Decoding is read-only; all mutation goes through the training loop.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    layout: Layout,
    fso: Vec<Option<FsoLayer>>,
    pub params: ParameterStore,
    pub masks: SessionMaskSet,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let params = ParameterStore::init(&layout, seed);
        Self::from_parts(config, params, None)
    }

    /// Reassembles a model from stored parts; `masks` defaults to no sessions.
    pub fn from_parts(config: ModelConfig, params: ParameterStore, masks: Option<SessionMaskSet>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        params.check_layout(&layout)?;
        let masks = masks.unwrap_or_else(|| SessionMaskSet::new(layout.sizes()));
        if masks.sizes() != layout.sizes().as_slice() {
            return Err(Error::Shape("mask set does not match the model layout".into()));
        }
        let trunk = config.trunk_channels();
        for h in &params.heads {
            if h.weight.len() != config.head_channels * trunk || h.bias.len() != config.head_channels {
                return Err(Error::Shape("head does not match the trunk width".into()));
            }
        }
        let fso = (0..config.block_channels.len())
            .map(|b| {
                config
                    .fso_for_block(b)
                    .map(|p| {
                        FsoLayer::new(
                            config.block_in_channels(b),
                            config.block_channels[b],
                            p.modes_h,
                            p.modes_w,
                            config.block_in_spatial(b),
                            config.block_out_spatial(b),
                            p.use_imaginary,
                        )
                    })
                    .transpose()
            })
            .collect::<Result<_>>()?;
        Ok(Self { config, layout, fso, params, masks })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn fso_layer(&self, block: usize) -> Option<&FsoLayer> {
        self.fso.get(block).and_then(Option::as_ref)
    }

    /// Sessions with a frozen mask and head.
    pub fn session_count(&self) -> usize {
        self.masks.session_count()
    }

    pub fn output_shape(&self) -> [usize; 3] {
        let (h, w) = self.config.output_spatial();
        [self.config.head_channels, h, w]
    }

    pub fn new_head(&self, seed: u64) -> Head {
        Head::init(self.config.head_channels, self.config.trunk_channels(), seed)
    }

    pub fn embedding(&self, session: usize, frame: usize, frames: usize) -> Result<Vec<f64>> {
        let (s, t) = normalize_indices(session, frame, frames, self.config.max_sessions)?;
        positional_encode(s, t, &self.config)
    }

    /// Decodes with a finished session's frozen mask and head.
    pub fn decode(&self, session: usize, embedding: &[f64]) -> Result<Tensor> {
        let masks = self.masks.session(session)?;
        let head = self
            .params
            .heads
            .get(session)
            .ok_or(Error::UnknownSession { session, available: self.params.heads.len() })?;
        let weights = self.params.effective(masks)?;
        Ok(self.forward_with(embedding, &weights, head)?.1.output)
    }

    pub fn decode_frame(&self, session: usize, frame: usize, frames: usize) -> Result<Tensor> {
        let e = self.embedding(session, frame, frames)?;
        self.decode(session, &e)
    }

    /// Full forward pass over explicit effective weights (`theta * m`).
    pub fn forward_with(&self, embedding: &[f64], weights: &[Vec<f64>], head: &Head) -> Result<(Tensor, ForwardCache)> {
        let cfg = &self.config;
        if embedding.len() != cfg.embed_dim() {
            return Err(Error::Shape(format!(
                "embedding has {} entries, expected {}",
                embedding.len(),
                cfg.embed_dim()
            )));
        }
        if weights.len() != self.layout.specs.len() {
            return Err(Error::Shape(format!("{} weight tensors, expected {}", weights.len(), self.layout.specs.len())));
        }

        let mut stem_inputs = Vec::new();
        let mut stem_pre = Vec::new();
        let mut act = embedding.to_vec();
        for (k, &wi) in self.layout.stem_weights.iter().enumerate() {
            let out = cfg.stem_dims[k + 1];
            let bias = self.layout.stem_biases[k].map(|bi| weights[bi].as_slice());
            let pre = linear(&act, &weights[wi], bias, out);
            stem_inputs.push(std::mem::replace(&mut act, pre.iter().map(|&v| gelu(v)).collect()));
            stem_pre.push(pre);
        }
        let (h0, w0) = cfg.base_spatial;
        let mut x = Tensor::from_vec(&[cfg.stem_channels(), h0, w0], act)?;

        let mut block_inputs = Vec::new();
        let mut block_pre = Vec::new();
        let mut fso_caches = Vec::new();
        for (b, slots) in self.layout.blocks.iter().enumerate() {
            let r = cfg.upscale_factors[b];
            let (ho, wo) = cfg.block_out_spatial(b);
            let mut z = match (slots.conv_weight, slots.conv_bias) {
                (Some(wi), Some(bi)) => pixel_shuffle(&conv3x3(&x, &weights[wi], &weights[bi])?, r)?,
                _ => Tensor::zeros(&[cfg.block_channels[b], ho, wo]),
            };
            let cache = match (&self.fso[b], slots.fso_real) {
                (Some(layer), Some(ri)) => {
                    let imag = slots.fso_imag.map(|ii| weights[ii].as_slice());
                    let (y, cache) = layer.forward(&x, &weights[ri], imag)?;
                    z.add_assign(&y);
                    Some(cache)
                }
                _ => None,
            };
            fso_caches.push(cache);
            let next = z.map(gelu);
            block_inputs.push(std::mem::replace(&mut x, next));
            block_pre.push(z);
        }

        let (c, h, w) = x.chw()?;
        let hc = cfg.head_channels;
        if head.weight.len() != hc * c || head.bias.len() != hc {
            return Err(Error::Shape("head does not match the trunk width".into()));
        }
        let mut output = Tensor::zeros(&[hc, h, w]);
        {
            let plane = h * w;
            let src = x.data();
            let dst = output.data_mut();
            for o in 0..hc {
                let out = &mut dst[o * plane..(o + 1) * plane];
                out.iter_mut().for_each(|v| *v = head.bias[o]);
                for k in 0..c {
                    let wv = head.weight[o * c + k];
                    for (d, s) in out.iter_mut().zip(&src[k * plane..(k + 1) * plane]) {
                        *d += wv * s;
                    }
                }
                if cfg.output_squash {
                    out.iter_mut().for_each(|v| *v = sigmoid(*v));
                }
            }
        }
        let cache = ForwardCache {
            stem_inputs,
            stem_pre,
            block_inputs,
            block_pre,
            fso: fso_caches,
            trunk: x,
            output: output.clone(),
        };
        Ok((output, cache))
    }

    /// Reverse-mode pass from `dL/d output` to every weight and the head.
    pub fn backward(&self, cache: &ForwardCache, weights: &[Vec<f64>], head: &Head, grad_out: &Tensor) -> Result<Gradients> {
        let cfg = &self.config;
        cache.output.ensure_same_shape(grad_out, "output gradient")?;
        let mut trunk_grads: Vec<Vec<f64>> = weights.iter().map(|w| vec![0.0; w.len()]).collect();

        let mut g_logits = grad_out.clone();
        if cfg.output_squash {
            for (g, &s) in g_logits.data_mut().iter_mut().zip(cache.output.data()) {
                *g *= s * (1.0 - s);
            }
        }
        let (c, h, w) = cache.trunk.chw()?;
        let plane = h * w;
        let hc = cfg.head_channels;
        let mut g_head = head.zeros_like();
        let mut g_x = Tensor::zeros(&[c, h, w]);
        {
            let t = cache.trunk.data();
            let g = g_logits.data();
            let gx = g_x.data_mut();
            for o in 0..hc {
                let go = &g[o * plane..(o + 1) * plane];
                g_head.bias[o] = go.iter().sum();
                for k in 0..c {
                    let tk = &t[k * plane..(k + 1) * plane];
                    g_head.weight[o * c + k] = go.iter().zip(tk).map(|(a, b)| a * b).sum();
                    let wv = head.weight[o * c + k];
                    for (d, gv) in gx[k * plane..(k + 1) * plane].iter_mut().zip(go) {
                        *d += wv * gv;
                    }
                }
            }
        }

        for b in (0..self.layout.blocks.len()).rev() {
            let slots = &self.layout.blocks[b];
            let pre = &cache.block_pre[b];
            let input = &cache.block_inputs[b];
            let mut g_z = g_x;
            for (g, &z) in g_z.data_mut().iter_mut().zip(pre.data()) {
                *g *= gelu_grad(z);
            }
            let (ci, hi, wi) = input.chw()?;
            let mut g_in = Tensor::zeros(&[ci, hi, wi]);
            if let (Some(wi_), Some(bi)) = (slots.conv_weight, slots.conv_bias) {
                let g_conv = pixel_unshuffle(&g_z, cfg.upscale_factors[b])?;
                let grads = conv3x3_backward(input, &weights[wi_], &g_conv)?;
                trunk_grads[wi_] = grads.weight;
                trunk_grads[bi] = grads.bias;
                g_in.add_assign(&grads.input);
            }
            if let (Some(layer), Some(ri), Some(fc)) = (&self.fso[b], slots.fso_real, &cache.fso[b]) {
                let imag = slots.fso_imag.map(|ii| weights[ii].as_slice());
                let grads = layer.backward(fc, &g_z, &weights[ri], imag)?;
                trunk_grads[ri] = grads.real;
                if let (Some(ii), Some(gi)) = (slots.fso_imag, grads.imag) {
                    trunk_grads[ii] = gi;
                }
                g_in.add_assign(&grads.input);
            }
            g_x = g_in;
        }

        let mut g_act = g_x.into_data();
        for k in (0..self.layout.stem_weights.len()).rev() {
            let g_pre: Vec<f64> =
                g_act.iter().zip(&cache.stem_pre[k]).map(|(g, &z)| g * gelu_grad(z)).collect();
            let wi = self.layout.stem_weights[k];
            let (g_in, g_w) = linear_backward(&cache.stem_inputs[k], &weights[wi], &g_pre);
            trunk_grads[wi] = g_w;
            if let Some(bi) = self.layout.stem_biases[k] {
                trunk_grads[bi] = g_pre;
            }
            g_act = g_in;
        }
        Ok(Gradients { trunk: trunk_grads, head: g_head })
    }
}

/// Checks a mask set against a model's layout.
pub fn check_masks(model: &Model, masks: &[BitMask]) -> Result<()> {
    let sizes = model.layout().sizes();
    if masks.len() != sizes.len() || masks.iter().zip(&sizes).any(|(m, &n)| m.len() != n) {
        return Err(Error::Shape("mask set does not match the model layout".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::subnet::BitMask;

    fn model_with_session(cfg: ModelConfig) -> Model {
        let mut m = Model::new(cfg, 1).unwrap();
        let masks: Vec<BitMask> = m.layout().sizes().iter().map(|&n| BitMask::ones(n)).collect();
        m.masks.push_session(masks).unwrap();
        let head = m.new_head(2);
        m.params.heads.push(head);
        m
    }

    #[test]
    fn desk_output_shape_and_range() {
        let mut cfg = ModelConfig::desk();
        cfg.block_channels = vec![8, 8];
        cfg.stem_dims = vec![160, 32, 8 * 16];
        let m = model_with_session(cfg);
        let y = m.decode_frame(0, 1, 4).unwrap();
        assert_eq!(y.shape(), &[3, 16, 16]);
        assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn all_ones_mask_equals_dense_forward() {
        let m = model_with_session(ModelConfig::desk());
        let e = m.embedding(0, 0, 4).unwrap();
        let masked = m.decode(0, &e).unwrap();
        let (dense, _) = m.forward_with(&e, &m.params.trunk, &m.params.heads[0]).unwrap();
        assert!(masked.bit_eq(&dense));
    }

    #[test]
    fn masked_out_weight_does_not_affect_decode() {
        let mut m = Model::new(ModelConfig::desk(), 4).unwrap();
        let masks: Vec<BitMask> = m
            .layout()
            .sizes()
            .iter()
            .map(|&n| BitMask::from_bits((0..n).map(|i| i % 2 == 0).collect()))
            .collect();
        m.masks.push_session(masks).unwrap();
        let head = m.new_head(5);
        m.params.heads.push(head);
        let before = m.decode_frame(0, 2, 4).unwrap();
        for t in &mut m.params.trunk {
            for v in t.iter_mut().skip(1).step_by(2) {
                *v = 42.0;
            }
        }
        assert!(before.bit_eq(&m.decode_frame(0, 2, 4).unwrap()));
    }

    #[test]
    fn unknown_session_is_an_error() {
        let m = model_with_session(ModelConfig::desk());
        assert!(matches!(m.decode_frame(1, 0, 4), Err(Error::UnknownSession { .. })));
    }

    #[test]
    fn full_size_counts() {
        let counts: Vec<usize> = count_parameters(&ModelConfig::full()).iter().map(|r| r.count).collect();
        assert_eq!(
            counts,
            vec![81_920, 8_257_536, 2_825_200, 1_605_632, 387_456, 37_847_040, 332_160, 332_160, 332_160, 291]
        );
    }
}
