use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::fso::fso_param_count;
use crate::subnet::BitMask;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorRole {
    /// Ranked by scores and selected at the configured capacity.
    Weight,
    /// Selected whole by whichever session trains first, frozen afterwards.
    Bias,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: TensorRole,
    pub fan_in: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Trunk tensor indices for one decoder block.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BlockSlots {
    pub conv_weight: Option<usize>,
    pub conv_bias: Option<usize>,
    pub fso_real: Option<usize>,
    pub fso_imag: Option<usize>,
}

/// Ordered list of maskable trunk tensors derived from a config.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub specs: Vec<TensorSpec>,
    pub stem_weights: Vec<usize>,
    pub stem_biases: Vec<Option<usize>>,
    pub blocks: Vec<BlockSlots>,
}

impl Layout {
    pub fn new(config: &ModelConfig) -> Self {
        let mut specs = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, role: TensorRole, fan_in: usize| {
            specs.push(TensorSpec { name, shape, role, fan_in });
            specs.len() - 1
        };
        let mut stem_weights = Vec::new();
        let mut stem_biases = Vec::new();
        for (k, pair) in config.stem_dims.windows(2).enumerate() {
            let (i, o) = (pair[0], pair[1]);
            stem_weights.push(push(format!("stem.{k}.weight"), vec![o, i], TensorRole::Weight, i));
            stem_biases.push(config.stem_bias.then(|| push(format!("stem.{k}.bias"), vec![o], TensorRole::Bias, i)));
        }
        let mut blocks = Vec::new();
        for b in 0..config.block_channels.len() {
            let cin = config.block_in_channels(b);
            let cout = config.block_channels[b];
            let r = config.upscale_factors[b];
            let mut slots = BlockSlots::default();
            if config.block_has_conv(b) {
                let fan = cin * 9;
                slots.conv_weight =
                    Some(push(format!("blocks.{b}.conv.weight"), vec![cout * r * r, cin, 3, 3], TensorRole::Weight, fan));
                slots.conv_bias = Some(push(format!("blocks.{b}.conv.bias"), vec![cout * r * r], TensorRole::Bias, fan));
            }
            if let Some(p) = config.fso_for_block(b) {
                let shape = vec![p.modes_h, p.modes_w, cin, cout];
                slots.fso_real = Some(push(format!("blocks.{b}.fso.real"), shape.clone(), TensorRole::Weight, cin));
                if p.use_imaginary {
                    slots.fso_imag = Some(push(format!("blocks.{b}.fso.imag"), shape, TensorRole::Weight, cin));
                }
            }
            blocks.push(slots);
        }
        Self { specs, stem_weights, stem_biases, blocks }
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.specs.iter().map(TensorSpec::len).collect()
    }

    /// Per-tensor selection fraction: `capacity` for weights, 1 for biases.
    pub fn capacities(&self, capacity: f64) -> Vec<f64> {
        self.specs
            .iter()
            .map(|s| match s.role {
                TensorRole::Weight => capacity,
                TensorRole::Bias => 1.0,
            })
            .collect()
    }

    pub fn score_shapes(&self) -> Vec<(usize, usize)> {
        self.specs.iter().map(|s| (s.len(), s.fan_in)).collect()
    }
}

/// Session-specific 1x1 output convolution; never masked.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    /// `(out_channels, trunk_channels)` row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Head {
    pub fn init(out_channels: usize, in_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (in_channels as f64).sqrt();
        let weight = (0..out_channels * in_channels).map(|_| rng.gen_range(-bound..bound)).collect();
        let bias = (0..out_channels).map(|_| rng.gen_range(-bound..bound)).collect();
        Self { weight, bias }
    }

    pub fn zeros_like(&self) -> Self {
        Self { weight: vec![0.0; self.weight.len()], bias: vec![0.0; self.bias.len()] }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Trunk weights (shared by all sessions) and one head per session.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore {
    pub trunk: Vec<Vec<f64>>,
    pub heads: Vec<Head>,
}

impl ParameterStore {
    /// Uniform `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for every trunk tensor.
    pub fn init(layout: &Layout, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trunk = layout
            .specs
            .iter()
            .map(|s| {
                let bound = 1.0 / (s.fan_in.max(1) as f64).sqrt();
                (0..s.len()).map(|_| rng.gen_range(-bound..bound)).collect()
            })
            .collect();
        Self { trunk, heads: Vec::new() }
    }

    pub fn check_layout(&self, layout: &Layout) -> Result<()> {
        if self.trunk.len() != layout.specs.len() {
            return Err(Error::Shape(format!(
                "store has {} trunk tensors, layout {}",
                self.trunk.len(),
                layout.specs.len()
            )));
        }
        for (t, s) in self.trunk.iter().zip(&layout.specs) {
            if t.len() != s.len() {
                return Err(Error::Shape(format!("{}: {} values, expected {}", s.name, t.len(), s.len())));
            }
        }
        Ok(())
    }

    /// `theta * m` for each trunk tensor.
    pub fn effective(&self, masks: &[BitMask]) -> Result<Vec<Vec<f64>>> {
        if masks.len() != self.trunk.len() {
            return Err(Error::Shape(format!("{} masks for {} tensors", masks.len(), self.trunk.len())));
        }
        self.trunk
            .iter()
            .zip(masks)
            .map(|(t, m)| {
                if t.len() != m.len() {
                    return Err(Error::Shape(format!("mask of {} bits for {} weights", m.len(), t.len())));
                }
                Ok(m.apply(t))
            })
            .collect()
    }

    /// Rounds every value to the nearest `f32`, making the store exactly
    /// representable in a 32-bit checkpoint.
    pub fn round_to_f32(&mut self) {
        let round = |v: &mut f64| *v = *v as f32 as f64;
        self.trunk.iter_mut().flatten().for_each(round);
        for h in &mut self.heads {
            h.weight.iter_mut().chain(h.bias.iter_mut()).for_each(round);
        }
    }
}

/// Parameter count of one layer, as listed by [`count_parameters`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerCount {
    pub name: String,
    pub count: usize,
}

/// Closed-form per-layer counts: stem `in*out` (+`out` with bias), conv
/// `in*out*r^2*9 + out*r^2`, spectral `modes*in*out*2`, head `in*3 + 3`.
pub fn count_parameters(config: &ModelConfig) -> Vec<LayerCount> {
    let mut rows = Vec::new();
    for (k, pair) in config.stem_dims.windows(2).enumerate() {
        let bias = if config.stem_bias { pair[1] } else { 0 };
        rows.push(LayerCount { name: format!("stem.{k}"), count: pair[0] * pair[1] + bias });
    }
    for b in 0..config.block_channels.len() {
        let cin = config.block_in_channels(b);
        let cout = config.block_channels[b];
        let r2 = config.upscale_factors[b] * config.upscale_factors[b];
        if config.block_has_conv(b) {
            rows.push(LayerCount { name: format!("blocks.{b}.conv"), count: cin * cout * r2 * 9 + cout * r2 });
        }
        if let Some(p) = config.fso_for_block(b) {
            rows.push(LayerCount { name: format!("blocks.{b}.fso"), count: fso_param_count(p, cin, cout) });
        }
    }
    let trunk = config.trunk_channels();
    rows.push(LayerCount { name: "head".into(), count: trunk * config.head_channels + config.head_channels });
    rows
}

/// Trunk parameters plus one head.
pub fn total_parameters(config: &ModelConfig) -> usize {
    count_parameters(config).iter().map(|r| r.count).sum()
}
